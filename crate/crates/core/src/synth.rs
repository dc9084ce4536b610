//! Seeded synthetic videos standing in for annotated face footage.
//!
//! Each video carries a latent affect state per frame: AU activations follow
//! sticky two-state chains, the expression is a sticky categorical chain and
//! valence/arousal are clipped AR(1) processes. Frames are rendered as small
//! images whose blobs and bars encode the latent state, so both the image
//! models and the feature providers see signal tied to the labels.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameRecord, N_AU, N_EXPR};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Columns of [`SyntheticVideo::latent_matrix`]: valence, arousal, 12 AU
/// activations, then the one-hot expression.
pub const LATENT_DIM: usize = 2 + N_AU + N_EXPR;

const AU_SWITCH: f64 = 0.04;
const AU_ON: f64 = 0.35;
const EXPR_SWITCH: f64 = 0.03;
const VA_PHI: f64 = 0.97;
const VA_STEP: f64 = 0.12;
const PIXEL_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFrame {
    pub au: [u8; N_AU],
    pub expr: u8,
    pub valence: f64,
    pub arousal: f64,
}

impl LatentFrame {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut au = [0u8; N_AU];
        au.iter_mut().for_each(|a| *a = rng.random_bool(AU_ON) as u8);
        LatentFrame {
            au,
            expr: rng.random_range(0..N_EXPR as u8),
            valence: rng.random_range(-1.0..1.0),
            arousal: rng.random_range(-1.0..1.0),
        }
    }

    pub fn to_row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(LATENT_DIM);
        row.push(self.valence);
        row.push(self.arousal);
        row.extend(self.au.iter().map(|&a| a as f64));
        row.extend((0..N_EXPR).map(|c| (c == self.expr as usize) as u8 as f64));
        row
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Probability that the face detector misses a frame.
    #[serde(default)]
    pub missing_face_rate: f64,
    /// Probability that an annotator skipped a frame (all labels `-1`).
    #[serde(default)]
    pub unannotated_rate: f64,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn one() -> usize {
    1
}

fn default_fps() -> f64 {
    25.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 {
            return Err(Error::Config("n_videos must be positive".into()));
        }
        if self.min_frames == 0 || self.max_frames < self.min_frames {
            return Err(Error::Config(format!(
                "frame range {}..={} is empty",
                self.min_frames, self.max_frames
            )));
        }
        for (name, p) in [
            ("missing_face_rate", self.missing_face_rate),
            ("unannotated_rate", self.unannotated_rate),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.image_size < 8 || self.channels == 0 {
            return Err(Error::Config("images must be at least 8×8 with one channel".into()));
        }
        if !self.fps.is_finite() || self.fps <= 0.0 {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub frames: Vec<LatentFrame>,
    pub face_present: Vec<bool>,
    pub annotated: Vec<bool>,
    /// Seed for pixel noise when rendering.
    pub render_seed: u64,
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `[n_frames × LATENT_DIM]` ground-truth state, annotated or not.
    pub fn latent_matrix(&self) -> Array2<f64> {
        let rows: Vec<f64> = self.frames.iter().flat_map(|f| f.to_row()).collect();
        Array2::from_shape_vec((self.len(), LATENT_DIM), rows).expect("row length")
    }

    /// Label records; skipped frames carry no labels.
    pub fn records(&self) -> Vec<FrameRecord> {
        self.frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let mut r = FrameRecord::unlabeled(self.video_id.clone(), t);
                r.face_present = self.face_present[t];
                if self.annotated[t] {
                    r.au = Some(f.au);
                    r.expr = Some(f.expr);
                    r.valence = Some(f.valence);
                    r.arousal = Some(f.arousal);
                }
                r
            })
            .collect()
    }

    pub fn render(&self, t: usize, image_size: usize, channels: usize) -> Array3<f64> {
        render_frame(
            &self.frames[t],
            image_size,
            channels,
            derive_seed(self.render_seed, &t.to_string()),
        )
    }

    /// Rendered frames, `None` where no face was detected.
    pub fn render_all(&self, image_size: usize, channels: usize) -> Vec<Option<Array3<f64>>> {
        (0..self.len())
            .map(|t| self.face_present[t].then(|| self.render(t, image_size, channels)))
            .collect()
    }
}

fn clip_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

pub fn generate_video(video_id: &str, n_frames: usize, spec: &SynthSpec, seed: u64) -> SyntheticVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.0, VA_STEP).expect("positive std");
    let mut state = LatentFrame::random(&mut rng);
    state.valence *= 0.5;
    state.arousal *= 0.5;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        frames.push(state);
        for a in state.au.iter_mut() {
            if rng.random_bool(AU_SWITCH) {
                *a = rng.random_bool(AU_ON) as u8;
            }
        }
        if rng.random_bool(EXPR_SWITCH) {
            state.expr = rng.random_range(0..N_EXPR as u8);
        }
        state.valence = clip_unit(VA_PHI * state.valence + step.sample(&mut rng));
        state.arousal = clip_unit(VA_PHI * state.arousal + step.sample(&mut rng));
    }
    let mut face_present: Vec<bool> = (0..n_frames)
        .map(|_| !rng.random_bool(spec.missing_face_rate))
        .collect();
    if !face_present.iter().any(|&p| p) {
        face_present[0] = true;
    }
    let annotated = (0..n_frames)
        .map(|_| !rng.random_bool(spec.unannotated_rate))
        .collect();
    SyntheticVideo {
        video_id: video_id.to_string(),
        frames,
        face_present,
        annotated,
        render_seed: rng.random(),
    }
}

/// Videos `vid000`, `vid001`, ... with lengths drawn from the spec's range.
pub fn generate_videos(spec: &SynthSpec, seed: u64) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..spec.n_videos)
        .map(|i| {
            let n = rng.random_range(spec.min_frames..=spec.max_frames);
            let id = format!("vid{i:03}");
            generate_video(&id, n, spec, derive_seed(seed, &id))
        })
        .collect())
}

fn bump(img: &mut Array3<f64>, cy: f64, cx: f64, sigma: f64, amp: f64) {
    let (h, w, c) = img.dim();
    let r = (3.0 * sigma).ceil() as isize;
    let (iy, ix) = (cy.round() as isize, cx.round() as isize);
    for y in (iy - r).max(0)..(iy + r + 1).min(h as isize) {
        for x in (ix - r).max(0)..(ix + r + 1).min(w as isize) {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let v = amp * (-0.5 * d2 / (sigma * sigma)).exp();
            for ch in 0..c {
                img[[y as usize, x as usize, ch]] += v;
            }
        }
    }
}

/// Renders one `[size × size × channels]` frame with values in `[0, 1]`.
pub fn render_frame(state: &LatentFrame, size: usize, channels: usize, noise_seed: u64) -> Array3<f64> {
    let s = size as f64;
    let mut img = Array3::from_elem((size, size, channels), 0.15);
    // Face ellipse.
    let (cy, cx, ry, rx) = (0.55 * s, 0.5 * s, 0.38 * s, 0.3 * s);
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                for ch in 0..channels {
                    img[[y, x, ch]] += 0.25;
                }
            }
        }
    }
    // AU blobs on a 3×4 lattice inside the face.
    let sigma = s / 18.0;
    for (j, &a) in state.au.iter().enumerate() {
        if a == 1 {
            let (row, col) = ((j / 4) as f64, (j % 4) as f64);
            bump(&mut img, (0.32 + 0.2 * row) * s, (0.26 + 0.16 * col) * s, sigma, 0.35);
        }
    }
    // Expression marker along the top edge.
    let e = state.expr as f64;
    bump(&mut img, 0.07 * s, (0.08 + 0.12 * e) * s, sigma, 0.4);
    // Valence as mouth brightness, arousal as side bars.
    let mouth_y = (0.88 * s) as usize;
    for x in (0.35 * s) as usize..(0.65 * s) as usize {
        for ch in 0..channels {
            img[[mouth_y.min(size - 1), x, ch]] += 0.2 * state.valence;
        }
    }
    for y in (0.3 * s) as usize..(0.8 * s) as usize {
        for x in [0, 1, size - 2, size - 1] {
            for ch in 0..channels {
                img[[y, x, ch]] += 0.2 * state.arousal;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");
    for (idx, v) in img.indexed_iter_mut() {
        let tint = 1.0 - 0.1 * idx.2 as f64;
        *v = (*v * tint + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    img
}

/// Independent frames with random latent states, for self-supervised
/// pretraining.
pub fn pretraining_images(n: usize, size: usize, channels: usize, seed: u64) -> Vec<Array3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let state = LatentFrame::random(&mut rng);
            render_frame(&state, size, channels, rng.random())
        })
        .collect()
}

/// Shuffled frame sample across videos, for frame-level fine-tuning:
/// `(video index, frame index)` pairs of annotated frames with a face.
pub fn sample_labeled_frames(videos: &[SyntheticVideo], max_frames: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pool: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, vid)| {
            (0..vid.len())
                .filter(|&t| vid.face_present[t] && vid.annotated[t])
                .map(move |t| (v, t))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(max_frames);
    pool
}
