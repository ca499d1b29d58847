//! Synthetic datasets with a planted layer.
//!
//! Every sample gets a latent vector `z` in `[-1, 1]^C`. One informative
//! layer carries `z` in every frame plus zero-mean (per channel) jitter, so
//! its mean-pooled features equal `z` up to `f32` rounding. All other layers
//! are i.i.d. Gaussian noise. The score is
//! `clip(bias + w . pooled + noise, 0, 100)` where `pooled` is the ear
//! average of the informative layer's mean-pooled, as-stored features, so an
//! affine model of that layer fits noise-free data exactly.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::feature_file::{write_feature_file, LayerFeatureTensor, EARS};
use super::manifest::{Audiogram, Manifest, Sample, SfmAttributes, SfmDescriptor};
use super::registry;
use crate::error::{Error, Result};

pub const SCORE_BIAS: f64 = 50.0;
/// Sum of `|w_i|`; bounds the noise-free score to `50 ± 45`.
pub const WEIGHT_L1: f64 = 45.0;
const SHARED_QUALITY: f64 = 0.8;
const FRAME_JITTER_SD: f64 = 0.5;
pub const DEFAULT_FREQUENCIES: [f64; 8] = [250.0, 500.0, 1000.0, 2000.0, 3000.0, 4000.0, 6000.0, 8000.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub name: String,
    pub n_samples: usize,
    pub layers: usize,
    pub frames: usize,
    pub channels: usize,
    pub frequencies: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub informative_layer: usize,
    pub listeners: usize,
    pub systems: usize,
}

impl SynthSpec {
    pub fn new(n_samples: usize, layers: usize, frames: usize, channels: usize, frequencies: usize, noise_sd: f64, seed: u64) -> Self {
        Self {
            name: "synthetic".into(),
            n_samples,
            layers,
            frames,
            channels,
            frequencies,
            noise_sd,
            seed,
            informative_layer: layers * 2 / 3,
            listeners: 27,
            systems: 18,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.layers == 0 || self.frames == 0 || self.channels == 0 || self.frequencies == 0 {
            return Err(Error::Config("synthetic dims must be positive".into()));
        }
        if self.informative_layer >= self.layers {
            return Err(Error::Config(format!(
                "informative layer {} out of range for {} layers",
                self.informative_layer, self.layers
            )));
        }
        if self.listeners == 0 || self.systems == 0 {
            return Err(Error::Config("need at least one listener and system".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise_sd must be non-negative, got {}", self.noise_sd)));
        }
        Ok(())
    }
}

/// One model of a [`synth_family`].
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyMember {
    pub name: String,
    pub informative_layer: usize,
    /// Per-sample Gaussian corruption of the latent this model sees.
    pub corruption_sd: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub informative_layer: usize,
}

struct Metadata {
    weights: Vec<f64>,
    latents: Vec<Vec<f64>>,
    noise: Vec<f64>,
    listeners: Vec<usize>,
    systems: Vec<usize>,
    audiograms: Vec<Audiogram>,
}

fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(tag.as_bytes());
    h.finish()
}

fn metadata(spec: &SynthSpec) -> Metadata {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "metadata"));
    let c = spec.channels;
    let weights: Vec<f64> = (0..c)
        .map(|_| if rng.gen_bool(0.5) { WEIGHT_L1 } else { -WEIGHT_L1 } / c as f64)
        .collect();
    let noise_dist = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let listener_audiograms: Vec<Audiogram> = (0..spec.listeners)
        .map(|_| {
            let mut ear = || -> Vec<f64> {
                (0..spec.frequencies)
                    .map(|_| (rng.gen_range(0.0..80.0f64) * 2.0).round() / 2.0)
                    .collect()
            };
            let left = ear();
            let right = ear();
            Audiogram { left, right }
        })
        .collect();
    let mut latents = Vec::with_capacity(spec.n_samples);
    let mut noise = Vec::with_capacity(spec.n_samples);
    let mut listeners = Vec::with_capacity(spec.n_samples);
    let mut systems = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let quality: f64 = rng.gen_range(-1.0..1.0);
        let z = weights
            .iter()
            .map(|w| SHARED_QUALITY * quality * w.signum() + (1.0 - SHARED_QUALITY) * rng.gen_range(-1.0..1.0))
            .collect();
        latents.push(z);
        noise.push(if spec.noise_sd > 0.0 { noise_dist.sample(&mut rng) } else { 0.0 });
        listeners.push(i % spec.listeners);
        systems.push(rng.gen_range(0..spec.systems));
    }
    let audiograms = listeners.iter().map(|&l| listener_audiograms[l].clone()).collect();
    Metadata {
        weights,
        latents,
        noise,
        listeners,
        systems,
        audiograms,
    }
}

/// Features for one sample. `latent` is written into `informative` layer of
/// both ears; returns the tensor and the ear-averaged pooled informative
/// features as stored.
fn sample_features<R: Rng>(
    rng: &mut R,
    layers: usize,
    frames: usize,
    latent: &[f64],
    informative: usize,
) -> (LayerFeatureTensor, Vec<f64>) {
    let c = latent.len();
    let std_normal = Normal::new(0.0, 1.0).expect("valid sd");
    let mut values = Vec::with_capacity(EARS * layers * frames * c);
    for _ear in 0..EARS {
        for layer in 0..layers {
            if layer == informative {
                let mut jitter: Vec<f64> = (0..frames * c)
                    .map(|_| FRAME_JITTER_SD * std_normal.sample(rng))
                    .collect();
                for ch in 0..c {
                    let mean = (0..frames).map(|t| jitter[t * c + ch]).sum::<f64>() / frames as f64;
                    for t in 0..frames {
                        jitter[t * c + ch] -= mean;
                    }
                }
                for t in 0..frames {
                    for ch in 0..c {
                        values.push((latent[ch] + jitter[t * c + ch]) as f32);
                    }
                }
            } else {
                values.extend((0..frames * c).map(|_| std_normal.sample(rng) as f32));
            }
        }
    }
    let t = LayerFeatureTensor::new(layers, frames, c, values).expect("finite by construction");
    let mut pooled = vec![0.0; c];
    for ear in 0..EARS {
        let slab = t.slab(ear, informative);
        for frame in slab.chunks(c) {
            for (p, &v) in pooled.iter_mut().zip(frame) {
                *p += v as f64;
            }
        }
    }
    let denom = (EARS * frames) as f64;
    pooled.iter_mut().for_each(|p| *p /= denom);
    (t, pooled)
}

fn descriptor_for(name: &str, layers: usize, channels: usize) -> SfmDescriptor {
    let attributes = registry::descriptor(name)
        .map(|d| d.attributes)
        .unwrap_or(SfmAttributes {
            asr_wer: 0.0,
            data_hours: 0.0,
            arch_date: "0000-00".into(),
            train_task_count: 0,
        });
    SfmDescriptor {
        name: name.to_string(),
        layers,
        channels,
        attributes,
    }
}

fn write_dataset(
    out_dir: &Path,
    spec: &SynthSpec,
    meta: &Metadata,
    name: &str,
    informative: usize,
    corruption_sd: Option<f64>,
) -> Result<SynthOutput> {
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &format!("features/{name}")));
    let corruption = Normal::new(0.0, corruption_sd.unwrap_or(0.0).max(f64::MIN_POSITIVE)).expect("valid sd");

    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let latent = &meta.latents[i];
        let seen: Vec<f64> = match corruption_sd {
            Some(sd) if sd > 0.0 => latent.iter().map(|z| z + corruption.sample(&mut rng)).collect(),
            _ => latent.clone(),
        };
        let (features, pooled) = sample_features(&mut rng, spec.layers, spec.frames, &seen, informative);
        // single-model datasets tie the score to the stored features; families to the shared latent
        let signal_source = if corruption_sd.is_some() { latent } else { &pooled };
        let signal: f64 = meta.weights.iter().zip(signal_source).map(|(w, z)| w * z).sum();
        let score = (SCORE_BIAS + signal + meta.noise[i]).clamp(0.0, 100.0);

        let sample_id = format!("S{i:05}");
        let rel = format!("features/{sample_id}.sfmf");
        write_feature_file(&features, &out_dir.join(&rel))?;
        samples.push(Sample {
            sample_id,
            listener_id: format!("L{:02}", meta.listeners[i] + 1),
            system_id: format!("E{:03}", meta.systems[i] + 1),
            score,
            feature_path: rel,
            audiogram: meta.audiograms[i].clone(),
        });
    }
    let manifest = Manifest {
        sfm: descriptor_for(name, spec.layers, spec.channels),
        audiogram_frequencies: DEFAULT_FREQUENCIES
            .iter()
            .copied()
            .cycle()
            .take(spec.frequencies)
            .collect(),
        samples,
    };
    manifest.validate()?;
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(SynthOutput {
        manifest_path,
        manifest,
        weights: meta.weights.clone(),
        bias: SCORE_BIAS,
        informative_layer: informative,
    })
}

/// Write a single-model synthetic dataset (manifest + feature files) to `out_dir`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let meta = metadata(spec);
    write_dataset(out_dir, spec, &meta, &spec.name, spec.informative_layer, None)
}

/// Several models observing the same samples: each member's informative
/// layer carries the shared latent plus member-specific corruption, and all
/// members share ids, listeners, audiograms and scores. Member `m` is written
/// to `out_dir/<m.name>/`.
pub fn synth_family(spec: &SynthSpec, members: &[FamilyMember], out_dir: &Path) -> Result<Vec<SynthOutput>> {
    spec.validate()?;
    let meta = metadata(spec);
    members
        .iter()
        .map(|m| {
            if m.informative_layer >= spec.layers {
                return Err(Error::Config(format!(
                    "member {:?} informative layer {} out of range",
                    m.name, m.informative_layer
                )));
            }
            write_dataset(
                &out_dir.join(&m.name),
                spec,
                &meta,
                &m.name,
                m.informative_layer,
                Some(m.corruption_sd),
            )
        })
        .collect()
}

/// FNV-1a over the manifest file and every feature file it references, in
/// manifest order.
pub fn dataset_hash(manifest_path: &Path) -> Result<u64> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    let mut h = fnv::FnvHasher::default();
    h.write(&fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?);
    for s in &manifest.samples {
        let p = root.join(&s.feature_path);
        h.write(&fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(h.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_scores_stay_inside_range() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(60, 3, 7, 5, 8, 0.0, 3);
        let out = synth_dataset(&spec, dir.path()).unwrap();
        for s in &out.manifest.samples {
            assert!(s.score > 0.0 && s.score < 100.0);
        }
        let spread: f64 = {
            let m = out.manifest.samples.iter().map(|s| s.score).sum::<f64>() / 60.0;
            (out.manifest.samples.iter().map(|s| (s.score - m).powi(2)).sum::<f64>() / 60.0).sqrt()
        };
        assert!(spread > 8.0, "score spread {spread}");
    }

    #[test]
    fn rejects_bad_specs() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::new(10, 3, 4, 2, 8, 1.0, 1);
        spec.informative_layer = 3;
        assert!(synth_dataset(&spec, dir.path()).is_err());
        let spec = SynthSpec::new(0, 3, 4, 2, 8, 1.0, 1);
        assert!(synth_dataset(&spec, dir.path()).is_err());
    }

    #[test]
    fn family_shares_samples() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(20, 3, 4, 4, 8, 1.0, 9);
        let members: Vec<FamilyMember> = ["a", "b"]
            .iter()
            .enumerate()
            .map(|(i, n)| FamilyMember {
                name: n.to_string(),
                informative_layer: i,
                corruption_sd: 0.1,
            })
            .collect();
        let outs = synth_family(&spec, &members, dir.path()).unwrap();
        assert_eq!(outs.len(), 2);
        let (a, b) = (&outs[0].manifest, &outs[1].manifest);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!((&x.sample_id, &x.listener_id, x.score), (&y.sample_id, &y.listener_id, y.score));
        }
        assert_ne!(
            dataset_hash(&outs[0].manifest_path).unwrap(),
            dataset_hash(&outs[1].manifest_path).unwrap()
        );
    }
}
