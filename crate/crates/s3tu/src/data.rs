//! Synthetic nodule-like dataset generation, PGM (P5) image I/O, dataset
//! manifests and input preprocessing.
//!
//! Generation is a pure function of `SynthConfig`: each sample draws from an
//! independent stream derived from (seed, sample index), so datasets are
//! reproducible regardless of generation order.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One image/mask pair. Image values in [0, 1], mask strictly binary.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    pub image: Tensor, // [1, H, W]
    pub mask: Tensor,  // [1, H, W]
    pub source: SampleSource,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SampleSource {
    Synthetic { seed: u64, index: usize },
    File { image: PathBuf, mask: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_size")]
    pub size: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Inclusive blob count range per sample.
    #[serde(default = "default_blob_count")]
    pub blob_count: (usize, usize),
    /// Blob radius range in pixels.
    #[serde(default = "default_radius")]
    pub radius: (f64, f64),
    /// Blob intensity range.
    #[serde(default = "default_contrast")]
    pub contrast: (f64, f64),
    /// Additive Gaussian pixel noise.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Radial boundary perturbation amplitude (0 = smooth ellipses).
    #[serde(default = "default_irregularity")]
    pub irregularity: f64,
    /// Peak amplitude of the smooth background field.
    #[serde(default = "default_background")]
    pub background: f64,
}

fn default_size() -> usize {
    128
}
fn default_blob_count() -> (usize, usize) {
    (1, 3)
}
fn default_radius() -> (f64, f64) {
    (4.0, 20.0)
}
fn default_contrast() -> (f64, f64) {
    (0.55, 0.95)
}
fn default_noise() -> f64 {
    0.05
}
fn default_irregularity() -> f64 {
    0.15
}
fn default_background() -> f64 {
    0.15
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.n_samples == 0 {
            return Err(Error::Config("size and n_samples must be positive".into()));
        }
        if self.blob_count.0 == 0 || self.blob_count.0 > self.blob_count.1 {
            return Err(Error::Config(format!(
                "blob count range {:?} invalid",
                self.blob_count
            )));
        }
        if self.radius.0 <= 0.0 || self.radius.0 > self.radius.1 {
            return Err(Error::Config(format!("radius range {:?} invalid", self.radius)));
        }
        let max_extent = self.radius.1 * (1.0 + self.irregularity);
        if 2.0 * max_extent >= self.size as f64 {
            return Err(Error::Config(format!(
                "largest blob (radius {:.1}) does not fit a {} px patch",
                max_extent, self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.contrast.0)
            || self.contrast.0 > self.contrast.1
            || self.contrast.1 > 1.0
        {
            return Err(Error::Config(format!(
                "contrast range {:?} invalid",
                self.contrast
            )));
        }
        if self.noise_sigma < 0.0 || self.irregularity < 0.0 {
            return Err(Error::Config("noise/irregularity must be non-negative".into()));
        }
        Ok(())
    }

    /// Expected mask foreground fraction: mean blob count times the mean
    /// elliptical area (radii independent uniform), over the patch area.
    /// Overlap between blobs is ignored.
    pub fn expected_foreground_fraction(&self) -> f64 {
        let mean_r = (self.radius.0 + self.radius.1) / 2.0;
        let mean_count = (self.blob_count.0 + self.blob_count.1) as f64 / 2.0;
        // E[(1 + a f)^2] with f a zero-mean unit-ish perturbation adds
        // O(a^2); negligible at the default amplitude.
        mean_count * std::f64::consts::PI * mean_r * mean_r / (self.size * self.size) as f64
    }
}

const HARMONICS: usize = 4;

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    contrast: f64,
    amp: [f64; HARMONICS],
    phase: [f64; HARMONICS],
}

impl Blob {
    fn sample(rng: &mut Rng, cfg: &SynthConfig) -> Blob {
        let rx = rng.uniform(cfg.radius.0, cfg.radius.1);
        let ry = rng.uniform(cfg.radius.0, cfg.radius.1);
        let margin = rx.max(ry) * (1.0 + cfg.irregularity) + 1.0;
        let lo = margin;
        let hi = cfg.size as f64 - margin;
        let mut amp = [0.0; HARMONICS];
        let mut phase = [0.0; HARMONICS];
        for k in 0..HARMONICS {
            amp[k] = rng.uniform(0.0, cfg.irregularity / (k + 1) as f64);
            phase[k] = rng.uniform(0.0, std::f64::consts::TAU);
        }
        Blob {
            cx: rng.uniform(lo, hi),
            cy: rng.uniform(lo, hi),
            rx,
            ry,
            rot: rng.uniform(0.0, std::f64::consts::PI),
            contrast: rng.uniform(cfg.contrast.0, cfg.contrast.1),
            amp,
            phase,
        }
    }

    /// Star-convex boundary radius at polar angle phi (relative, unitless
    /// w.r.t. the base ellipse radius).
    fn boundary_scale(&self, phi: f64) -> f64 {
        let mut s = 1.0;
        for k in 0..HARMONICS {
            s += self.amp[k] * ((k + 2) as f64 * phi + self.phase[k]).cos();
        }
        s.max(0.2)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.rot.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let phi = v.atan2(u);
        let scale = self.boundary_scale(phi);
        let eu = u / (self.rx * scale);
        let ev = v / (self.ry * scale);
        eu * eu + ev * ev <= 1.0
    }
}

/// Generate the full synthetic dataset for a config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    (0..cfg.n_samples).map(|i| synth_sample(cfg, i)).collect()
}

/// Generate sample `index` of the dataset; pure in (config, index).
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<SamplePair> {
    let mut rng = Rng::for_stream(cfg.seed, index as u64);
    let s = cfg.size;
    let n_blobs = cfg.blob_count.0 + rng.below(cfg.blob_count.1 - cfg.blob_count.0 + 1);
    let blobs: Vec<Blob> = (0..n_blobs).map(|_| Blob::sample(&mut rng, cfg)).collect();

    // smooth background: low-frequency sinusoidal field
    let fx = rng.uniform(0.5, 1.5) * std::f64::consts::TAU / s as f64;
    let fy = rng.uniform(0.5, 1.5) * std::f64::consts::TAU / s as f64;
    let px = rng.uniform(0.0, std::f64::consts::TAU);
    let py = rng.uniform(0.0, std::f64::consts::TAU);

    let mut image = vec![0.0f64; s * s];
    let mut mask = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let bg = cfg.background * 0.5 * (2.0 + (fx * x as f64 + px).sin() + (fy * y as f64 + py).sin()) / 2.0;
            let mut v = bg;
            for blob in &blobs {
                if blob.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[i] = 1.0;
                    v = v.max(blob.contrast);
                }
            }
            image[i] = v;
        }
    }
    // noise after rendering, from the same stream
    if cfg.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v += rng.normal(0.0, cfg.noise_sigma);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SamplePair {
        id: format!("synth-{:06}", index),
        image: Tensor::new(vec![1, s, s], image)?,
        mask: Tensor::new(vec![1, s, s], mask)?,
        source: SampleSource::Synthetic {
            seed: cfg.seed,
            index,
        },
    })
}

// ---------------------------------------------------------------------------
// PGM (P5) I/O
// ---------------------------------------------------------------------------

/// Write a [1, H, W] or [H, W] tensor of [0, 1] values as binary PGM,
/// round-half-up to 8-bit.
pub fn save_pgm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = hw(t)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PGM (P5, maxval 255) into a [1, H, W] tensor of v/255.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut r = std::io::BufReader::new(file);
    let magic = pgm_token(&mut r)?;
    if magic != "P5" {
        return Err(Error::Format(format!(
            "{}: bad PGM magic '{}', expected P5",
            path.as_ref().display(),
            magic
        )));
    }
    let w: usize = pgm_token(&mut r)?
        .parse()
        .map_err(|_| Error::Format("PGM width is not a number".into()))?;
    let h: usize = pgm_token(&mut r)?
        .parse()
        .map_err(|_| Error::Format("PGM height is not a number".into()))?;
    let maxval: usize = pgm_token(&mut r)?
        .parse()
        .map_err(|_| Error::Format("PGM maxval is not a number".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {} unsupported, need 255", maxval)));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("PGM with zero dimension".into()));
    }
    let mut bytes = vec![0u8; w * h];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("PGM payload truncated: {e}")))?;
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Next whitespace-delimited token, skipping '#' comment lines. The final
/// header token is followed by exactly one whitespace byte before the payload.
fn pgm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("PGM header truncated".into()));
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        s => Err(Error::shape(
            "pgm",
            format!("expected [1,H,W] or [H,W], got {:?}", s),
        )),
    }
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

/// Center-crop (if larger) or symmetrically zero-pad (if smaller) a
/// single-channel [1, H, W] image to the target size. Retained pixels are
/// never altered.
pub fn preprocess(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = hw(image)?;
    let (th, tw) = target;
    let mut out = Tensor::zeros(&[1, th, tw]);
    for ty in 0..th {
        for tx in 0..tw {
            // map target coordinate to source coordinate around the center
            let sy = ty as isize + (h as isize - th as isize) / 2;
            let sx = tx as isize + (w as isize - tw as isize) / 2;
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                let v = image.data()[sy as usize * w + sx as usize];
                out.data_mut()[ty * tw + tx] = v;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dataset manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Load a manifest (JSON array of {id, image_path, mask_path}); relative
/// paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let image_path = base.join(&e.image_path);
            let mask_path = base.join(&e.mask_path);
            let image = load_pgm(&image_path)?;
            let raw_mask = load_pgm(&mask_path)?;
            let mask = raw_mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            if image.shape() != mask.shape() {
                return Err(Error::Format(format!(
                    "sample {}: image {:?} vs mask {:?}",
                    e.id,
                    image.shape(),
                    mask.shape()
                )));
            }
            Ok(SamplePair {
                id: e.id,
                image,
                mask,
                source: SampleSource::File {
                    image: image_path,
                    mask: mask_path,
                },
            })
        })
        .collect()
}

/// Write a dataset as PGM pairs plus manifest.json in `dir`.
pub fn write_dataset(samples: &[SamplePair], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image_path = PathBuf::from(format!("{}.pgm", s.id));
        let mask_path = PathBuf::from(format!("{}_mask.pgm", s.id));
        save_pgm(&s.image, dir.join(&image_path))?;
        save_pgm(&s.mask, dir.join(&mask_path))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            mask_path,
        });
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&entries)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            size: 64,
            n_samples: 4,
            seed: 9,
            blob_count: (1, 2),
            radius: (4.0, 10.0),
            contrast: (0.6, 0.9),
            noise_sigma: 0.03,
            irregularity: 0.2,
            background: 0.15,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn masks_are_binary_and_nontrivial() {
        let samples = generate_synthetic(&small_cfg()).unwrap();
        for s in &samples {
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let fg: f64 = s.mask.data().iter().sum();
            assert!(fg > 0.0, "empty mask in {}", s.id);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn clean_config_paints_exact_contrast_on_mask() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            contrast: (1.0, 1.0),
            background: 0.0,
            ..small_cfg()
        };
        let s = synth_sample(&cfg, 0).unwrap();
        for (i, (&img, &m)) in s.image.data().iter().zip(s.mask.data().iter()).enumerate() {
            if m == 1.0 {
                assert_eq!(img, 1.0, "pixel {i}");
            } else {
                assert_eq!(img, 0.0, "pixel {i}");
            }
        }
    }

    #[test]
    fn oversized_blobs_rejected() {
        let cfg = SynthConfig {
            size: 16,
            radius: (4.0, 20.0),
            ..small_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = std::env::temp_dir().join("s3tu_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = Rng::new(3);
        let t = Tensor::rand_uniform(&mut rng, &[1, 5, 7], 0.0, 1.0);
        let p = dir.join("rt.pgm");
        save_pgm(&t, &p).unwrap();
        let back = load_pgm(&p).unwrap();
        assert_eq!(back.shape(), &[1, 5, 7]);
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_fixture_bytes() {
        let dir = std::env::temp_dir().join("s3tu_pgm_fixture");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("fixture.pgm");
        std::fs::write(&p, [b"P5\n2 2\n255\n".as_slice(), &[0u8, 128, 255, 64]].concat()).unwrap();
        let t = load_pgm(&p).unwrap();
        assert_eq!(
            t.data(),
            &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]
        );
    }

    #[test]
    fn pgm_rejects_bad_magic_and_truncation() {
        let dir = std::env::temp_dir().join("s3tu_pgm_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.pgm");
        std::fs::write(&p, b"P2\n2 2\n255\n....").unwrap();
        assert!(load_pgm(&p).is_err());
        let p2 = dir.join("short.pgm");
        std::fs::write(&p2, b"P5\n4 4\n255\nxy").unwrap();
        assert!(load_pgm(&p2).is_err());
    }

    #[test]
    fn preprocess_identity_crop_and_pad() {
        let mut rng = Rng::new(4);
        let img = Tensor::rand_uniform(&mut rng, &[1, 10, 10], 0.0, 1.0);
        // identity
        assert_eq!(preprocess(&img, (10, 10)).unwrap(), img);
        // crop 10 -> 8: central window offset 1
        let cropped = preprocess(&img, (8, 8)).unwrap();
        assert_eq!(cropped.at(&[0, 0, 0]), img.at(&[0, 1, 1]));
        assert_eq!(cropped.at(&[0, 7, 7]), img.at(&[0, 8, 8]));
        // pad 10 -> 14: offset 2, zeros outside
        let padded = preprocess(&img, (14, 14)).unwrap();
        assert_eq!(padded.at(&[0, 0, 0]), 0.0);
        assert_eq!(padded.at(&[0, 2, 2]), img.at(&[0, 0, 0]));
        assert_eq!(padded.at(&[0, 11, 11]), img.at(&[0, 9, 9]));
    }

    #[test]
    fn dataset_write_and_load_round_trip() {
        let dir = std::env::temp_dir().join("s3tu_dataset_rt");
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = small_cfg();
        let samples = generate_synthetic(&cfg).unwrap();
        let manifest = write_dataset(&samples, &dir).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask, "masks must survive the PGM round trip exactly");
            for (x, y) in a.image.data().iter().zip(b.image.data().iter()) {
                assert!((x - y).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }
}
