//! Synthetic speaker corpora, multi-crop sampling, spectrogram-style masking
//! and the binary feature file / text manifest formats.
//!
//! Feature file layout (all integers little-endian):
//!
//! ```text
//! "SDFK" | version u16 | T u32 | F u32 | T·F f64 row-major
//!        | id_len u32 | utterance_id utf-8
//!        | [ spk_len u32 | speaker_id utf-8 ]      (optional trailer)
//! ```

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RealMatrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"SDFK";
pub const FEATURE_VERSION: u16 = 1;

/// An utterance with its (optional) speaker label.
///
/// Labels exist only for evaluation; the trainer consumes
/// [`UnlabeledUtterance`], which has no place for them.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    pub frames: RealMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnlabeledUtterance {
    pub utterance_id: String,
    pub frames: RealMatrix,
}

impl Utterance {
    pub fn without_label(&self) -> UnlabeledUtterance {
        UnlabeledUtterance {
            utterance_id: self.utterance_id.clone(),
            frames: self.frames.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub feature_dim: usize,
    pub intra_speaker_spread: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            utts_per_speaker: 10,
            frames_per_utt: 300,
            feature_dim: 24,
            intra_speaker_spread: 0.5,
            seed: 0,
        }
    }
}

pub fn speaker_name(index: usize) -> String {
    format!("spk{index:03}")
}

pub fn utterance_name(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:03}-utt{utt:03}")
}

/// Each speaker gets a Gaussian mean vector and a slow sinusoidal pattern
/// (per-speaker amplitude and frequency, per-utterance phase); frames add
/// `spread · N(0, I)` noise on top.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    if cfg.num_speakers < 2 {
        return Err(Error::InvalidConfig("need at least 2 speakers".into()));
    }
    if !(cfg.intra_speaker_spread > 0.0) {
        return Err(Error::InvalidConfig(
            "intra_speaker_spread must be positive".into(),
        ));
    }
    if cfg.utts_per_speaker == 0 || cfg.frames_per_utt == 0 || cfg.feature_dim == 0 {
        return Err(Error::InvalidConfig("corpus dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.feature_dim;
    let amp = Normal::new(0.0, 0.5).expect("valid normal");
    let mut corpus = Vec::with_capacity(cfg.num_speakers * cfg.utts_per_speaker);
    for s in 0..cfg.num_speakers {
        let mean: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
        let amplitude: Vec<f64> = (0..f).map(|_| amp.sample(&mut rng)).collect();
        let omega: f64 = rng.gen_range(0.02..0.2);
        for u in 0..cfg.utts_per_speaker {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut data = Vec::with_capacity(cfg.frames_per_utt * f);
            for t in 0..cfg.frames_per_utt {
                let wave = (omega * t as f64 + phase).sin();
                for j in 0..f {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push(mean[j] + amplitude[j] * wave + cfg.intra_speaker_spread * noise);
                }
            }
            corpus.push(Utterance {
                utterance_id: utterance_name(s, u),
                speaker_id: Some(speaker_name(s)),
                frames: RealMatrix::from_vec(cfg.frames_per_utt, f, data)?,
            });
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub num_global: usize,
    pub num_local: usize,
    pub global_frames: usize,
    pub local_frames: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            num_global: 1,
            num_local: 4,
            global_frames: 200,
            local_frames: 100,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_global == 0 || self.num_local == 0 || self.local_frames == 0 {
            return Err(Error::InvalidConfig(
                "need at least one global and one local crop of positive length".into(),
            ));
        }
        if self.local_frames >= self.global_frames {
            return Err(Error::InvalidConfig(format!(
                "local crops ({}) must be shorter than global crops ({})",
                self.local_frames, self.global_frames
            )));
        }
        Ok(())
    }
}

/// Global and local views cut from one utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CropSet {
    pub source: String,
    pub global_views: Vec<RealMatrix>,
    pub local_views: Vec<RealMatrix>,
    /// Start frame of every global then every local crop.
    pub offsets: Vec<usize>,
}

fn cut(frames: &RealMatrix, start: usize, len: usize) -> RealMatrix {
    let f = frames.cols();
    let data = frames.as_slice()[start * f..(start + len) * f].to_vec();
    RealMatrix::from_vec(len, f, data).expect("crop within bounds")
}

/// The middle `len` frames, or every frame when the utterance is shorter.
pub fn centre_crop(frames: &RealMatrix, len: usize) -> RealMatrix {
    if frames.rows() <= len {
        return frames.clone();
    }
    cut(frames, (frames.rows() - len) / 2, len)
}

/// Uniformly placed crops; every view lies inside `[0, T)`.
pub fn sample_crops<R: Rng + ?Sized>(
    utt: &UnlabeledUtterance,
    cfg: &CropConfig,
    rng: &mut R,
) -> Result<CropSet> {
    cfg.validate()?;
    let t = utt.frames.rows();
    if t < cfg.global_frames {
        return Err(Error::UtteranceTooShort {
            frames: t,
            required: cfg.global_frames,
        });
    }
    let mut offsets = Vec::with_capacity(cfg.num_global + cfg.num_local);
    let mut take = |len: usize, rng: &mut R| {
        let start = rng.gen_range(0..=t - len);
        offsets.push(start);
        cut(&utt.frames, start, len)
    };
    let global_views = (0..cfg.num_global)
        .map(|_| take(cfg.global_frames, rng))
        .collect();
    let local_views = (0..cfg.num_local)
        .map(|_| take(cfg.local_frames, rng))
        .collect();
    Ok(CropSet {
        source: utt.utterance_id.clone(),
        global_views,
        local_views,
        offsets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub max_time_masks: usize,
    pub max_freq_masks: usize,
    pub max_width: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            max_time_masks: 1,
            max_freq_masks: 1,
            max_width: 4,
        }
    }
}

/// Result of [`spec_mask_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFrames {
    pub frames: RealMatrix,
    pub time_masks: Vec<Range<usize>>,
    pub freq_masks: Vec<Range<usize>>,
}

/// Picks up to `max_count` disjoint, non-adjacent bands in `0..extent`.
fn place_bands<R: Rng + ?Sized>(
    extent: usize,
    max_count: usize,
    max_width: usize,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let count = rng.gen_range(0..=max_count);
    let mut bands: Vec<Range<usize>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while bands.len() < count && attempts < 64 * (count + 1) {
        attempts += 1;
        let width = rng.gen_range(1..=max_width);
        let start = rng.gen_range(0..=extent - width);
        let band = start..start + width;
        let clashes = bands
            .iter()
            .any(|b| band.start <= b.end && b.start <= band.end);
        if !clashes {
            bands.push(band);
        }
    }
    bands.sort_by_key(|b| b.start);
    bands
}

/// Sets random contiguous time rows and feature columns to the matrix mean.
pub fn spec_mask<R: Rng + ?Sized>(
    frames: &RealMatrix,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<RealMatrix> {
    spec_mask_detailed(frames, cfg, rng).map(|m| m.frames)
}

pub fn spec_mask_detailed<R: Rng + ?Sized>(
    frames: &RealMatrix,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskedFrames> {
    let (t, f) = frames.shape();
    if cfg.max_time_masks + cfg.max_freq_masks == 0 {
        return Ok(MaskedFrames {
            frames: frames.clone(),
            time_masks: Vec::new(),
            freq_masks: Vec::new(),
        });
    }
    if cfg.max_width == 0 || cfg.max_width >= t.min(f) {
        return Err(Error::InvalidConfig(format!(
            "mask width {} must lie in [1, {})",
            cfg.max_width,
            t.min(f)
        )));
    }
    let fill = frames.sum() / (t * f) as f64;
    let time_masks = place_bands(t, cfg.max_time_masks, cfg.max_width, rng);
    let freq_masks = place_bands(f, cfg.max_freq_masks, cfg.max_width, rng);
    let mut out = frames.clone();
    for band in &time_masks {
        for row in band.clone() {
            out.row_mut(row).fill(fill);
        }
    }
    for band in &freq_masks {
        for row in 0..t {
            for col in band.clone() {
                out[(row, col)] = fill;
            }
        }
    }
    Ok(MaskedFrames {
        frames: out,
        time_masks,
        freq_masks,
    })
}

/// Encodes an utterance in the feature file layout.
pub fn encode_features(utt: &Utterance) -> Vec<u8> {
    let (t, f) = utt.frames.shape();
    let mut buf = Vec::with_capacity(14 + t * f * 8 + utt.utterance_id.len() + 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for v in utt.frames.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_string(&mut buf, &utt.utterance_id);
    if let Some(spk) = &utt.speaker_id {
        put_string(&mut buf, spk);
    }
    buf
}

pub(crate) fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Little-endian cursor that reports byte offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::malformed(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::malformed(self.offset(), format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let start = self.offset();
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::malformed(start, format!("{what} is not valid UTF-8")))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4], version: u16) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::malformed(0, format!("bad magic {got:?}")));
        }
        let found = self.u16("version")?;
        if found != version {
            return Err(Error::malformed(4, format!("unsupported version {found}")));
        }
        Ok(())
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Utterance> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC, FEATURE_VERSION)?;
    let t = r.u32("frame count")? as usize;
    let f = r.u32("feature dimension")? as usize;
    if t == 0 || f == 0 {
        return Err(Error::malformed(6, format!("empty {t}x{f} matrix")));
    }
    let data_offset = r.offset();
    let data = r.f64s(t * f, "frame data")?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::malformed(data_offset, "non-finite frame value"));
    }
    let utterance_id = r.string("utterance id")?;
    let speaker_id = if r.at_end() {
        None
    } else {
        Some(r.string("speaker id")?)
    };
    if !r.at_end() {
        return Err(Error::malformed(r.offset(), "trailing bytes"));
    }
    Ok(Utterance {
        utterance_id,
        speaker_id,
        frames: RealMatrix::from_vec(t, f, data)?,
    })
}

pub fn write_feature_file(utt: &Utterance, path: &Path) -> Result<()> {
    fs::write(path, encode_features(utt))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Utterance> {
    decode_features(&fs::read(path)?)
}

/// One manifest line: `utterance_id<TAB>path[<TAB>speaker_id]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub path: PathBuf,
    pub speaker_id: Option<String>,
}

/// Parses a manifest; relative paths resolve against the manifest's folder.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let line_offset = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::malformed(
                line_offset,
                format!("manifest line needs 2 or 3 tab-separated fields: `{line}`"),
            ));
        }
        let p = Path::new(fields[1]);
        entries.push(ManifestEntry {
            utterance_id: fields[0].to_string(),
            path: if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            },
            speaker_id: fields.get(2).map(|s| s.to_string()),
        });
    }
    Ok(entries)
}

/// Writes manifest lines; `path` fields are written verbatim.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        write!(out, "{}\t{}", e.utterance_id, e.path.display())?;
        if let Some(spk) = &e.speaker_id {
            write!(out, "\t{spk}")?;
        }
        writeln!(out)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads every utterance a manifest lists, checking ids agree.
pub fn load_manifest_utterances(path: &Path) -> Result<Vec<Utterance>> {
    read_manifest(path)?
        .into_iter()
        .map(|entry| {
            let mut utt = read_feature_file(&entry.path)?;
            if utt.utterance_id != entry.utterance_id {
                return Err(Error::InvalidConfig(format!(
                    "manifest id `{}` does not match file id `{}` in {}",
                    entry.utterance_id,
                    utt.utterance_id,
                    entry.path.display()
                )));
            }
            if entry.speaker_id.is_some() {
                utt.speaker_id = entry.speaker_id;
            }
            Ok(utt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use super::*;

    fn small_corpus(spread: f64, seed: u64) -> Vec<Utterance> {
        generate_synthetic_corpus(&CorpusConfig {
            num_speakers: 20,
            utts_per_speaker: 10,
            frames_per_utt: 120,
            feature_dim: 24,
            intra_speaker_spread: spread,
            seed,
        })
        .unwrap()
    }

    fn mean_frame(u: &Utterance) -> Vec<f64> {
        let (t, f) = u.frames.shape();
        (0..f)
            .map(|j| (0..t).map(|i| u.frames[(i, j)]).sum::<f64>() / t as f64)
            .collect()
    }

    /// Nearest-centroid probe: centroids from even utterances, tested on odd.
    fn probe_accuracy(corpus: &[Utterance]) -> f64 {
        let mut centroids: std::collections::BTreeMap<&str, (Vec<f64>, usize)> = Default::default();
        for (i, u) in corpus.iter().enumerate() {
            if i % 2 == 0 {
                let e = centroids
                    .entry(u.speaker_id.as_deref().unwrap())
                    .or_insert((vec![0.0; u.frames.cols()], 0));
                crate::numerics::axpy(1.0, &mean_frame(u), &mut e.0);
                e.1 += 1;
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for u in corpus.iter().skip(1).step_by(2) {
            let m = mean_frame(u);
            let best = centroids
                .iter()
                .map(|(spk, (sum, n))| {
                    let c: Vec<f64> = sum.iter().map(|x| x / *n as f64).collect();
                    (crate::numerics::euclidean_distance(&m, &c), *spk)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            correct += usize::from(Some(best) == u.speaker_id.as_deref());
            total += 1;
        }
        correct as f64 / total as f64
    }

    #[test]
    fn corpus_is_deterministic_and_separable() {
        let a = small_corpus(0.5, 9);
        assert_eq!(a, small_corpus(0.5, 9));
        assert_ne!(a, small_corpus(0.5, 10));
        assert_eq!(a.len(), 200);
        assert!(probe_accuracy(&a) >= 0.95);
        assert_eq!(probe_accuracy(&small_corpus(1e-9, 3)), 1.0);
    }

    #[test]
    fn corpus_rejects_bad_config() {
        let bad = CorpusConfig {
            num_speakers: 1,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_synthetic_corpus(&bad), Err(Error::InvalidConfig(_))));
        let bad = CorpusConfig {
            intra_speaker_spread: 0.0,
            ..CorpusConfig::default()
        };
        assert!(generate_synthetic_corpus(&bad).is_err());
    }

    fn toy_utterance(t: usize) -> UnlabeledUtterance {
        let data = (0..t * 3).map(|i| i as f64).collect();
        UnlabeledUtterance {
            utterance_id: "u".into(),
            frames: RealMatrix::from_vec(t, 3, data).unwrap(),
        }
    }

    #[test]
    fn crops_have_configured_lengths_and_full_length_global() {
        let cfg = CropConfig {
            global_frames: 10,
            local_frames: 4,
            ..CropConfig::default()
        };
        let utt = toy_utterance(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let crops = sample_crops(&utt, &cfg, &mut rng).unwrap();
        assert_eq!(crops.global_views[0], utt.frames);
        assert_eq!(crops.local_views.len(), 4);
        assert!(crops.local_views.iter().all(|v| v.shape() == (4, 3)));
        assert!(matches!(
            sample_crops(&toy_utterance(9), &cfg, &mut rng),
            Err(Error::UtteranceTooShort { frames: 9, required: 10 })
        ));
    }

    #[test]
    fn crop_offsets_reproduce_with_seed() {
        let cfg = CropConfig {
            global_frames: 20,
            local_frames: 8,
            ..CropConfig::default()
        };
        let utt = toy_utterance(50);
        let a = sample_crops(&utt, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_crops(&utt, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.offsets, b.offsets);
        assert_eq!(a, b);
    }

    #[test]
    fn mask_identity_and_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = toy_utterance(12).frames;
        let none = MaskConfig {
            max_time_masks: 0,
            max_freq_masks: 0,
            max_width: 0,
        };
        assert_eq!(spec_mask(&x, &none, &mut rng).unwrap(), x);
        let too_wide = MaskConfig {
            max_width: 3,
            ..MaskConfig::default()
        };
        assert!(matches!(spec_mask(&x, &too_wide, &mut rng), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn feature_round_trip_and_truncation() {
        let utt = Utterance {
            utterance_id: "spk001-utt002".into(),
            speaker_id: Some("spk001".into()),
            frames: RealMatrix::from_vec(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap(),
        };
        let bytes = encode_features(&utt);
        assert_eq!(decode_features(&bytes).unwrap(), utt);
        let unlabeled = Utterance {
            speaker_id: None,
            ..utt.clone()
        };
        assert_eq!(decode_features(&encode_features(&unlabeled)).unwrap(), unlabeled);
        for cut in [0, 3, 5, 13, 20, bytes.len() - 1] {
            assert!(matches!(
                decode_features(&bytes[..cut]),
                Err(Error::MalformedFile { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::MalformedFile { offset: 0, .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                utterance_id: "a".into(),
                path: "feats/a.sdfk".into(),
                speaker_id: Some("s1".into()),
            },
            ManifestEntry {
                utterance_id: "b".into(),
                path: "feats/b.sdfk".into(),
                speaker_id: None,
            },
        ];
        let path = dir.path().join("m.tsv");
        write_manifest(&entries, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].path, dir.path().join("feats/a.sdfk"));
        assert_eq!(back[1].speaker_id, None);
        fs::write(&path, "a\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::MalformedFile { .. })));
    }

    proptest! {
        #[test]
        fn crops_stay_inside_the_utterance(
            global in 2usize..40,
            local_frac in 0.0..1.0f64,
            extra in 0usize..3,
            num_local in 1usize..5,
            seed in any::<u64>(),
        ) {
            let local = 1 + ((global - 1) as f64 * local_frac) as usize % (global - 1);
            let t = global + extra;
            let data = (0..t * 2).map(|i| i as f64).collect();
            let utt = UnlabeledUtterance {
                utterance_id: "u".into(),
                frames: RealMatrix::from_vec(t, 2, data).unwrap(),
            };
            let cfg = CropConfig { num_global: 1, num_local, global_frames: global, local_frames: local };
            let crops = sample_crops(&utt, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let views = crops.global_views.iter().chain(&crops.local_views);
            for (view, &start) in views.zip(&crops.offsets) {
                prop_assert!(start + view.rows() <= t);
                prop_assert_eq!(view.row(0)[0], (2 * start) as f64);
            }
        }

        #[test]
        fn masking_leaves_the_unmasked_block_untouched(
            t in 6usize..40,
            f in 6usize..30,
            kt in 0usize..3,
            kf in 0usize..3,
            w in 1usize..5,
            seed in any::<u64>(),
        ) {
            let data = (0..t * f).map(|i| (i as f64).sqrt() + 0.5).collect();
            let frames = RealMatrix::from_vec(t, f, data).unwrap();
            let cfg = MaskConfig { max_time_masks: kt, max_freq_masks: kf, max_width: w };
            let out = spec_mask(&frames, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let same = frames
                .as_slice()
                .iter()
                .zip(out.as_slice())
                .filter(|(a, b)| a.to_bits() == b.to_bits())
                .count();
            prop_assert!(same >= t.saturating_sub(kt * w) * f.saturating_sub(kf * w));
        }
    }
}
