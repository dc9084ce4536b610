//! Per-frame feature sequences: vision features from a fine-tuned encoder,
//! synthetic audio providers, rate alignment, concatenation and an on-disk
//! cache.
//!
//! Cache layout for key `{provider}__{video}__{hash}`:
//!
//! * `{key}.json` holds `provider_id`, `video_id`, `shape: [n_frames, d]`,
//!   `dtype: "float32"`.
//! * `{key}.bin` holds `n_frames * d` little-endian `f32` values, row-major,
//!   with no header.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::write_file;
use crate::error::{Error, Result};
use crate::mae::FineTuneModel;
use crate::postprocess::fill_missing;
use crate::seed::derive_seed;

/// Dense per-frame features of one video from one provider.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub provider_id: String,
    pub video_id: String,
    /// `[n_frames × d]`; row `t` belongs to frame `t`.
    pub features: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(provider_id: impl Into<String>, video_id: impl Into<String>, features: Array2<f64>) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(Error::arg("feature dimension must be positive"));
        }
        Ok(FeatureSequence {
            provider_id: provider_id.into(),
            video_id: video_id.into(),
            features,
        })
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }
}

/// Which providers feed the fusion model, in concatenation order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSetSpec {
    pub vision_providers: Vec<String>,
    #[serde(default)]
    pub audio_providers: Vec<String>,
}

impl FeatureSetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vision_providers.is_empty() {
            return Err(Error::Config("feature set needs at least one vision provider".into()));
        }
        let mut seen = BTreeSet::new();
        for id in self.ordered() {
            if !seen.insert(id) {
                return Err(Error::Config(format!("provider `{id}` listed twice")));
            }
        }
        Ok(())
    }

    pub fn ordered(&self) -> impl Iterator<Item = &String> {
        self.vision_providers.iter().chain(&self.audio_providers)
    }
}

/// Pooled encoder output per frame. The model is borrowed immutably, so its
/// parameters cannot change during extraction.
pub fn extract_vision(
    provider_id: &str,
    video_id: &str,
    encoder: &FineTuneModel,
    frames: &[ArrayView3<f64>],
) -> Result<FeatureSequence> {
    if frames.is_empty() {
        return Err(Error::arg("no frames to encode"));
    }
    let mut rows = Array2::zeros((frames.len(), encoder.mae_config.encoder_dim));
    for (t, img) in frames.iter().enumerate() {
        rows.row_mut(t).assign(&encoder.encode(img.view())?.pooled);
    }
    FeatureSequence::new(provider_id, video_id, rows)
}

/// As [`extract_vision`], but frames without a detected face (`None`) take
/// the features of the nearest frame that has one.
pub fn extract_vision_with_gaps(
    provider_id: &str,
    video_id: &str,
    encoder: &FineTuneModel,
    frames: &[Option<ArrayView3<f64>>],
) -> Result<FeatureSequence> {
    let mut present = BTreeMap::new();
    for (t, img) in frames.iter().enumerate() {
        if let Some(img) = img {
            present.insert(t, encoder.encode(img.view())?.pooled.to_vec());
        }
    }
    if present.is_empty() {
        return Err(Error::arg(format!("video {video_id} has no frame with a face")));
    }
    FeatureSequence::new(provider_id, video_id, fill_missing(&present, frames.len())?)
}

/// Resamples audio features onto the video frame clock: frame `t` takes the
/// audio step nearest in time, clamped to the last step.
pub fn align_audio(audio: &FeatureSequence, audio_rate: f64, video_rate: f64, n_frames: usize) -> Result<FeatureSequence> {
    if n_frames == 0 {
        return Err(Error::arg("n_frames must be positive"));
    }
    if audio.n_frames() == 0 {
        return Err(Error::arg("audio sequence is empty"));
    }
    if !(audio_rate > 0.0 && video_rate > 0.0) {
        return Err(Error::arg("frame rates must be positive"));
    }
    let last = audio.n_frames() - 1;
    let idx: Vec<usize> = (0..n_frames)
        .map(|t| ((t as f64 * audio_rate / video_rate).round() as usize).min(last))
        .collect();
    FeatureSequence::new(
        audio.provider_id.clone(),
        audio.video_id.clone(),
        audio.features.select(Axis(0), &idx),
    )
}

/// Column-wise concatenation in the given order.
pub fn concat_sequences(seqs: &[&FeatureSequence]) -> Result<FeatureSequence> {
    let Some(first) = seqs.first() else {
        return Err(Error::arg("nothing to combine"));
    };
    for s in &seqs[1..] {
        if s.video_id != first.video_id {
            return Err(Error::Alignment(format!(
                "cannot combine videos {} and {}",
                first.video_id, s.video_id
            )));
        }
        if s.n_frames() != first.n_frames() {
            return Err(Error::Alignment(format!(
                "{}: provider {} has {} frames but {} has {}",
                first.video_id,
                first.provider_id,
                first.n_frames(),
                s.provider_id,
                s.n_frames()
            )));
        }
    }
    let views: Vec<ArrayView2<f64>> = seqs.iter().map(|s| s.features.view()).collect();
    let ids: Vec<&str> = seqs.iter().map(|s| s.provider_id.as_str()).collect();
    FeatureSequence::new(
        ids.join("+"),
        first.video_id.clone(),
        concatenate(Axis(1), &views).expect("equal row counts"),
    )
}

/// Concatenates the providers named by `spec`, vision first, each list in
/// its listed order.
pub fn combine(seqs: &[FeatureSequence], spec: &FeatureSetSpec) -> Result<FeatureSequence> {
    spec.validate()?;
    let ordered: Vec<&FeatureSequence> = spec
        .ordered()
        .map(|id| {
            seqs.iter()
                .find(|s| &s.provider_id == id)
                .ok_or_else(|| Error::arg(format!("no sequence from provider `{id}`")))
        })
        .collect::<Result<_>>()?;
    concat_sequences(&ordered)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AudioProfile {
    /// Features independent of the labels.
    Noise,
    /// Random linear mix of the planted signals plus noise; column 0 copies
    /// planted column 0.
    LabelCorrelated,
}

/// Deterministic stand-in for a pretrained audio model.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticAudioProvider {
    pub id: String,
    pub seed: u64,
    pub d: usize,
    pub profile: AudioProfile,
    /// Audio steps per second.
    pub rate: f64,
    pub noise_std: f64,
}

impl SyntheticAudioProvider {
    pub fn new(id: impl Into<String>, seed: u64, d: usize, profile: AudioProfile) -> Result<Self> {
        if d == 0 {
            return Err(Error::arg("audio feature dimension must be positive"));
        }
        Ok(SyntheticAudioProvider {
            id: id.into(),
            seed,
            d,
            profile,
            rate: 25.0,
            noise_std: 0.3,
        })
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    fn mixing(&self, n_signals: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "mixing"));
        let scale = 1.0 / (n_signals as f64).sqrt();
        let mut w = Array2::from_shape_fn((n_signals, self.d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        w.column_mut(0).fill(0.0);
        w[[0, 0]] = 1.0;
        w
    }

    /// Features at the provider's own rate for a video whose planted signals
    /// (`[n_frames × L]`, one row per video frame) run at `video_rate`.
    pub fn generate(&self, video_id: &str, planted: ArrayView2<f64>, video_rate: f64) -> Result<FeatureSequence> {
        if planted.nrows() == 0 || planted.ncols() == 0 {
            return Err(Error::arg("planted signals are empty"));
        }
        if !(video_rate > 0.0 && self.rate > 0.0) {
            return Err(Error::arg("frame rates must be positive"));
        }
        let n = planted.nrows();
        let m = ((n as f64 * self.rate / video_rate).round() as usize).max(1);
        let src: Vec<usize> = (0..m)
            .map(|j| ((j as f64 * video_rate / self.rate).floor() as usize).min(n - 1))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, video_id));
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).map_err(|e| Error::arg(e.to_string()))?;
        let mut out = match self.profile {
            AudioProfile::Noise => Array2::from_shape_fn((m, self.d), |_| rng.random_range(-1.0..1.0)),
            AudioProfile::LabelCorrelated => planted.select(Axis(0), &src).dot(&self.mixing(planted.ncols())),
        };
        out.mapv_inplace(|v| v + noise.sample(&mut rng));
        FeatureSequence::new(self.id.clone(), video_id, out)
    }
}

/// Short hex digest identifying the configuration that produced features.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Rounds features through `f32`, the cache's storage precision. Fresh and
/// cached features are both passed through this so they agree exactly.
pub fn quantize_f32(features: &Array2<f64>) -> Array2<f64> {
    features.mapv(|v| v as f32 as f64)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    provider_id: String,
    video_id: String,
    shape: [usize; 2],
    dtype: String,
}

#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn stem(&self, provider_id: &str, video_id: &str, hash: &str) -> PathBuf {
        self.dir.join(format!("{provider_id}__{video_id}__{hash}"))
    }

    pub fn paths(&self, provider_id: &str, video_id: &str, hash: &str) -> (PathBuf, PathBuf) {
        let stem = self.stem(provider_id, video_id, hash);
        (stem.with_extension("json"), stem.with_extension("bin"))
    }

    pub fn contains(&self, provider_id: &str, video_id: &str, hash: &str) -> bool {
        let (json, bin) = self.paths(provider_id, video_id, hash);
        json.is_file() && bin.is_file()
    }

    pub fn store(&self, seq: &FeatureSequence, hash: &str) -> Result<()> {
        let (json, bin) = self.paths(&seq.provider_id, &seq.video_id, hash);
        let sidecar = Sidecar {
            provider_id: seq.provider_id.clone(),
            video_id: seq.video_id.clone(),
            shape: [seq.n_frames(), seq.d()],
            dtype: "float32".into(),
        };
        let mut payload = Vec::with_capacity(seq.features.len() * 4);
        for v in seq.features.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        write_file(&bin, &payload)?;
        write_file(&json, serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn load(&self, provider_id: &str, video_id: &str, hash: &str) -> Result<Option<FeatureSequence>> {
        if !self.contains(provider_id, video_id, hash) {
            return Ok(None);
        }
        let (json, bin) = self.paths(provider_id, video_id, hash);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        if sidecar.dtype != "float32" {
            return Err(Error::Validation(format!(
                "{}: unsupported dtype {}",
                json.display(),
                sidecar.dtype
            )));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let [n, d] = sidecar.shape;
        if bytes.len() != n * d * 4 {
            return Err(Error::Validation(format!(
                "{}: expected {} bytes, found {}",
                bin.display(),
                n * d * 4,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let features = Array2::from_shape_vec((n, d), values).expect("length checked");
        FeatureSequence::new(sidecar.provider_id, sidecar.video_id, features).map(Some)
    }

    /// Cached sequence if present, otherwise computes, stores and returns it.
    /// The returned features are `f32`-rounded either way.
    pub fn get_or_compute<F>(&self, provider_id: &str, video_id: &str, hash: &str, compute: F) -> Result<FeatureSequence>
    where
        F: FnOnce() -> Result<FeatureSequence>,
    {
        if let Some(seq) = self.load(provider_id, video_id, hash)? {
            return Ok(seq);
        }
        let mut seq = compute()?;
        seq.features = quantize_f32(&seq.features);
        self.store(&seq, hash)?;
        Ok(seq)
    }

    /// Digest over every cache file's name and bytes, for detecting writes.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        if !self.dir.is_dir() {
            return Ok(String::new());
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| Error::io(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Task, TaskSpec};
    use crate::mae::{attach_head, MaeConfig, MaeModel};
    use crate::metrics::pcc;
    use ndarray::{s, Array3};

    fn seq(id: &str, n: usize, d: usize, base: f64) -> FeatureSequence {
        FeatureSequence::new(id, "v", Array2::from_shape_fn((n, d), |(i, j)| base + (i * d + j) as f64)).unwrap()
    }

    fn small_encoder() -> FineTuneModel {
        let mut cfg = MaeConfig::toy();
        cfg.image_size = 16;
        cfg.encoder_dim = 16;
        cfg.encoder_layers = 1;
        cfg.decoder_dim = 8;
        let mae = MaeModel::new(cfg, 1).unwrap();
        attach_head(&mae, TaskSpec::new(Task::Au), 2).unwrap()
    }

    #[test]
    fn vision_shapes_and_read_only() {
        let enc = small_encoder();
        let before = enc.encoder.checksum();
        let a = Array3::from_shape_fn((16, 16, 1), |(y, x, _)| ((y * 16 + x) % 7) as f64 / 7.0);
        let b = Array3::from_elem((16, 16, 1), 0.5);
        let frames = [a.view(), b.view(), a.view()];
        let out = extract_vision("mae", "v", &enc, &frames).unwrap();
        assert_eq!(out.features.dim(), (3, 16));
        assert_eq!(out.features.row(0), out.features.row(2));
        assert_ne!(out.features.row(0), out.features.row(1));
        assert_eq!(enc.encoder.checksum(), before);
        let wrong = Array3::zeros((8, 8, 1));
        assert!(extract_vision("mae", "v", &enc, &[wrong.view()]).is_err());
    }

    #[test]
    fn gaps_take_nearest_face() {
        let enc = small_encoder();
        let a = Array3::from_elem((16, 16, 1), 0.2);
        let b = Array3::from_elem((16, 16, 1), 0.8);
        let frames = [None, Some(a.view()), None, None, Some(b.view())];
        let out = extract_vision_with_gaps("mae", "v", &enc, &frames).unwrap();
        assert_eq!(out.n_frames(), 5);
        for (t, src) in [(0, 1), (2, 1), (3, 4)] {
            assert_eq!(out.features.row(t), out.features.row(src));
        }
        assert!(extract_vision_with_gaps("mae", "v", &enc, &[None, None]).is_err());
    }

    #[test]
    fn align_examples() {
        let audio = seq("aud", 10, 2, 0.0);
        let same = align_audio(&audio, 25.0, 25.0, 10).unwrap();
        assert_eq!(same.features, audio.features);
        let fast = seq("aud", 100, 1, 0.0);
        let out = align_audio(&fast, 50.0, 25.0, 40).unwrap();
        for t in 0..40 {
            assert_eq!(out.features[[t, 0]], (2 * t) as f64);
        }
        let short = align_audio(&audio, 25.0, 25.0, 14).unwrap();
        assert_eq!(short.n_frames(), 14);
        for t in 9..14 {
            assert_eq!(short.features.row(t), audio.features.row(9));
        }
        assert!(align_audio(&audio, 25.0, 25.0, 0).is_err());
        assert!(align_audio(&audio, 0.0, 25.0, 3).is_err());
    }

    #[test]
    fn combine_examples() {
        let v = seq("vis", 5, 64, 0.0);
        let a1 = seq("a1", 5, 16, 1000.0);
        let a2 = seq("a2", 5, 16, 2000.0);
        let spec = FeatureSetSpec {
            vision_providers: vec!["vis".into()],
            audio_providers: vec!["a1".into(), "a2".into()],
        };
        let all = [v.clone(), a1.clone(), a2.clone()];
        let c = combine(&all, &spec).unwrap();
        assert_eq!(c.d(), 96);
        assert_eq!(c.provider_id, "vis+a1+a2");
        let swapped = FeatureSetSpec {
            vision_providers: vec!["vis".into()],
            audio_providers: vec!["a2".into(), "a1".into()],
        };
        let c2 = combine(&all, &swapped).unwrap();
        assert_eq!(c2.features.slice(s![.., 64..80]), a2.features);
        assert_eq!(c2.features.slice(s![.., 80..96]), a1.features);
        let only = FeatureSetSpec {
            vision_providers: vec!["vis".into()],
            audio_providers: vec![],
        };
        assert_eq!(combine(&all, &only).unwrap().features, v.features);
        let short = seq("a1", 4, 16, 0.0);
        assert!(matches!(
            combine(&[v, short, a2], &spec),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let no_vision = FeatureSetSpec {
            vision_providers: vec![],
            audio_providers: vec!["a".into()],
        };
        assert!(no_vision.validate().is_err());
        let dup = FeatureSetSpec {
            vision_providers: vec!["a".into()],
            audio_providers: vec!["a".into()],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn synthetic_audio_profiles() {
        assert!(SyntheticAudioProvider::new("a", 1, 0, AudioProfile::Noise).is_err());
        let planted = Array2::from_shape_fn((1000, 3), |(i, j)| (i as f64 * 0.05 + j as f64).sin());
        let noise = SyntheticAudioProvider::new("a", 1, 4, AudioProfile::Noise).unwrap();
        assert_eq!(
            noise.generate("v", planted.view(), 25.0).unwrap(),
            noise.generate("v", planted.view(), 25.0).unwrap()
        );
        let corr = SyntheticAudioProvider::new("a", 1, 4, AudioProfile::LabelCorrelated).unwrap();
        let out = corr.generate("v", planted.view(), 25.0).unwrap();
        let r = pcc(out.features.column(0), planted.column(0)).unwrap();
        assert!(r > 0.5, "pearson {r}");
        let fast = corr.clone().with_rate(50.0).generate("v", planted.view(), 25.0).unwrap();
        assert_eq!(fast.n_frames(), 2000);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path().join("cache"));
        assert_eq!(cache.checksum().unwrap(), "");
        let s = FeatureSequence::new("vis", "v1", Array2::from_shape_fn((3, 2), |(i, j)| 0.1 * (i + j) as f64 + 1e-9)).unwrap();
        let mut calls = 0;
        let first = cache
            .get_or_compute("vis", "v1", "abc", || {
                calls += 1;
                Ok(s.clone())
            })
            .unwrap();
        assert_eq!(first.features, quantize_f32(&s.features));
        let sum = cache.checksum().unwrap();
        let second = cache
            .get_or_compute("vis", "v1", "abc", || {
                calls += 1;
                Ok(s.clone())
            })
            .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(first, second);
        assert_eq!(cache.checksum().unwrap(), sum);
        let (json, bin) = cache.paths("vis", "v1", "abc");
        assert_eq!(fs::read(bin).unwrap().len(), 3 * 2 * 4);
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(meta["shape"], serde_json::json!([3, 2]));
        assert_eq!(meta["dtype"], "float32");
        assert!(cache.load("vis", "v1", "other").unwrap().is_none());
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})).unwrap());
    }
}
