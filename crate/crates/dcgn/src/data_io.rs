//! On-disk formats and the synthetic corpus generator.
//!
//! Feature sequences are stored as a small binary format (magic `DCGN`,
//! version, row/column counts, then little-endian f32 values, row-major);
//! corpora are described by a JSON Lines manifest. The generator builds
//! videos as concatenations of constant-class shots plus Gaussian noise, so
//! shot structure genuinely exists for the segmenter to find.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DcgnError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"DCGN";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Write a feature matrix; values are narrowed to f32.
pub fn write_features(path: &Path, features: &Tensor2) -> Result<()> {
    if !features.is_finite() {
        return Err(DcgnError::NonFinite { context: format!("write_features {}", path.display()) });
    }
    let n = u32::try_from(features.rows())
        .map_err(|_| DcgnError::InvalidParameter(format!("{} rows exceed u32", features.rows())))?;
    let d = u32::try_from(features.cols())
        .map_err(|_| DcgnError::InvalidParameter(format!("{} cols exceed u32", features.cols())))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + features.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&d.to_le_bytes());
    for &v in features.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| DcgnError::io(path, e))
}

/// Read a feature matrix, validating the header, the exact payload length,
/// and value finiteness. Errors carry the byte offset of the problem.
pub fn read_features(path: &Path) -> Result<Tensor2> {
    let bytes = fs::read(path).map_err(|e| DcgnError::io(path, e))?;
    parse_features(&bytes)
}

fn parse_features(bytes: &[u8]) -> Result<Tensor2> {
    if bytes.len() < HEADER_LEN {
        return Err(DcgnError::Format {
            offset: bytes.len() as u64,
            reason: format!("truncated header: {} bytes, need {HEADER_LEN}", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(DcgnError::Format {
            offset: 0,
            reason: format!("bad magic {:?}, expected {:?}", &bytes[0..4], MAGIC),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DcgnError::Format {
            offset: 4,
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let expected_payload = n * d * 4;
    let actual_payload = (bytes.len() - HEADER_LEN) as u64;
    if actual_payload < expected_payload {
        return Err(DcgnError::Format {
            offset: bytes.len() as u64,
            reason: format!(
                "truncated payload: {n}x{d} needs {expected_payload} bytes, found {actual_payload}"
            ),
        });
    }
    if actual_payload > expected_payload {
        return Err(DcgnError::Format {
            offset: HEADER_LEN as u64 + expected_payload,
            reason: format!("{} trailing bytes after {n}x{d} payload", actual_payload - expected_payload),
        });
    }
    let count = (n * d) as usize;
    let mut data = Vec::with_capacity(count);
    for (idx, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DcgnError::Format {
                offset: (HEADER_LEN + idx * 4) as u64,
                reason: format!("non-finite value {v}"),
            });
        }
        data.push(v as f64);
    }
    Ok(Tensor2::from_vec(n as usize, d as usize, data))
}

/// One corpus entry: a feature file (path relative to the manifest) and its
/// ground-truth class indices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub labels: Vec<usize>,
}

/// Write entries as JSON Lines.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in entries {
        out.push_str(&serde_json::to_string(entry).expect("manifest entries serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DcgnError::io(path, e))
}

/// Load and validate a manifest: unique ids, labels below `num_classes`,
/// and every referenced file present (paths resolve relative to the
/// manifest's directory).
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| DcgnError::io(path, e))?;
    let dir = manifest_dir(path);
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            DcgnError::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(DcgnError::Manifest(format!(
                "{}:{}: duplicate id {:?}",
                path.display(),
                lineno + 1,
                entry.id
            )));
        }
        if let Some(&bad) = entry.labels.iter().find(|&&l| l >= num_classes) {
            return Err(DcgnError::Manifest(format!(
                "{}:{}: label {bad} out of range for {num_classes} classes",
                path.display(),
                lineno + 1
            )));
        }
        let features = dir.join(&entry.path);
        if !features.is_file() {
            return Err(DcgnError::Manifest(format!(
                "{}:{}: missing feature file {}",
                path.display(),
                lineno + 1,
                features.display()
            )));
        }
        entries.push(entry);
    }
    // An empty manifest is structurally valid; whether zero examples make
    // sense is the caller's call (training requires data, evaluation turns
    // it into an undefined-metric error).
    Ok(entries)
}

/// Directory that manifest-relative paths resolve against.
pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf()
}

/// Recipe for the synthetic corpus: videos are runs of shots, each shot a
/// class prototype repeated over its frame span plus i.i.d. Gaussian noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Inclusive [min, max] shots per video.
    pub shots_per_video: (usize, usize),
    /// Inclusive [min, max] frames per shot.
    pub frames_per_shot: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(DcgnError::InvalidParameter(
                "num_classes and dim must be positive".into(),
            ));
        }
        let (smin, smax) = self.shots_per_video;
        let (fmin, fmax) = self.frames_per_shot;
        if smin == 0 || smin > smax || fmin == 0 || fmin > fmax {
            return Err(DcgnError::InvalidParameter(format!(
                "bad shot/frame ranges {:?} {:?}",
                self.shots_per_video, self.frames_per_shot
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DcgnError::InvalidParameter(format!(
                "noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Stream indices >= 2^32 are reserved for corpus-level draws (prototypes),
/// keeping them disjoint from per-video streams at indices 0..count.
const PROTOTYPE_STREAM_BASE: u64 = 1 << 32;

/// The per-class unit prototype vectors implied by a spec's seed.
pub fn class_prototypes(spec: &SynthSpec) -> Tensor2 {
    let mut protos = Tensor2::zeros(spec.num_classes, spec.dim);
    for class in 0..spec.num_classes {
        let mut rng = SplitMix64::derive(spec.seed, PROTOTYPE_STREAM_BASE + class as u64);
        let row = protos.row_mut(class);
        loop {
            let mut norm_sq = 0.0;
            for v in row.iter_mut() {
                *v = rng.next_normal();
                norm_sq += *v * *v;
            }
            // A zero vector cannot be normalized; with continuous draws this
            // retry never fires in practice.
            if norm_sq > 0.0 {
                let norm = norm_sq.sqrt();
                for v in row.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    protos
}

/// One generated video: its frames and the classes of its shots, in order.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub frames: Tensor2,
    pub shot_classes: Vec<usize>,
    pub shot_lengths: Vec<usize>,
}

/// Generate video `index` deterministically from the spec seed. Consecutive
/// shots always use distinct classes (when more than one exists), so shot
/// boundaries are real signal boundaries.
pub fn synth_video(spec: &SynthSpec, prototypes: &Tensor2, index: u64) -> SynthVideo {
    let mut rng = SplitMix64::derive(spec.seed, index);
    let shots = rng.uniform_usize(spec.shots_per_video.0, spec.shots_per_video.1);
    let mut shot_classes = Vec::with_capacity(shots);
    let mut shot_lengths = Vec::with_capacity(shots);
    let mut total_frames = 0;
    for s in 0..shots {
        let class = loop {
            let candidate = rng.uniform_usize(0, spec.num_classes - 1);
            if spec.num_classes == 1 || s == 0 || candidate != shot_classes[s - 1] {
                break candidate;
            }
        };
        let frames = rng.uniform_usize(spec.frames_per_shot.0, spec.frames_per_shot.1);
        shot_classes.push(class);
        shot_lengths.push(frames);
        total_frames += frames;
    }
    let mut frames = Tensor2::zeros(total_frames, spec.dim);
    let mut t = 0;
    for (&class, &len) in shot_classes.iter().zip(&shot_lengths) {
        for _ in 0..len {
            for (v, p) in frames.row_mut(t).iter_mut().zip(prototypes.row(class)) {
                *v = p + spec.noise_std * rng.next_normal();
            }
            t += 1;
        }
    }
    SynthVideo { frames, shot_classes, shot_lengths }
}

/// Sorted distinct classes of a generated video — its ground-truth labels.
pub fn video_labels(video: &SynthVideo) -> Vec<usize> {
    let mut labels: Vec<usize> = video.shot_classes.clone();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Generate `count` videos into `out_dir` (feature files plus
/// `manifest.jsonl`) and return the manifest entries.
pub fn synth_corpus(spec: &SynthSpec, count: usize, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if count == 0 {
        return Err(DcgnError::InvalidParameter("corpus needs at least one video".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| DcgnError::io(out_dir, e))?;
    let prototypes = class_prototypes(spec);
    // Every video depends only on (seed, index), so parallel generation is
    // deterministic; files are written afterwards in index order.
    let videos: Vec<SynthVideo> = (0..count as u64)
        .into_par_iter()
        .map(|i| synth_video(spec, &prototypes, i))
        .collect();
    let mut entries = Vec::with_capacity(count);
    for (i, video) in videos.iter().enumerate() {
        let file = format!("video_{i:06}.bin");
        write_features(&out_dir.join(&file), &video.frames)?;
        entries.push(ManifestEntry {
            id: format!("video_{i:06}"),
            path: file,
            labels: video_labels(video),
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shots::{kts_fixed, segment_costs, segmentation_cost};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_classes: 4,
            dim: 8,
            shots_per_video: (2, 4),
            frames_per_shot: (2, 6),
            noise_std: 0.0,
            seed: 99,
        }
    }

    #[test]
    fn features_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SplitMix64::new(7);
        let m = Tensor2::glorot_uniform(7, 5, &mut rng);
        let path = dir.path().join("x.bin");
        write_features(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!((back.rows(), back.cols()), (7, 5));
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, *b as f32 as f64); // exactly the stored f32
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match read_features(&path) {
            Err(DcgnError::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_the_shortfall() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        // Declares 3x2 (24 payload bytes) but carries only 8.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DCGN");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        fs::write(&path, &bytes).unwrap();
        match read_features(&path) {
            Err(DcgnError::Format { offset, reason }) => {
                assert_eq!(offset, 24); // the file length, where data ran out
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DCGN");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&[0xAB; 3]);
        fs::write(&path, &bytes).unwrap();
        match read_features(&path) {
            Err(DcgnError::Format { offset: 20, .. }) => {}
            other => panic!("expected format error at offset 20, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DCGN");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match read_features(&path) {
            Err(DcgnError::Format { offset: 20, .. }) => {}
            other => panic!("expected format error at offset 20, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let features = Tensor2::zeros(2, 2);
        write_features(&dir.path().join("a.bin"), &features).unwrap();
        write_features(&dir.path().join("b.bin"), &features).unwrap();
        let entries = vec![
            ManifestEntry { id: "a".into(), path: "a.bin".into(), labels: vec![0, 2] },
            ManifestEntry { id: "b".into(), path: "b.bin".into(), labels: vec![1] },
        ];
        let manifest = dir.path().join("manifest.jsonl");
        write_manifest(&manifest, &entries).unwrap();
        let back = load_manifest(&manifest, 3).unwrap();
        assert_eq!(back, entries);

        // Out-of-range label.
        assert!(matches!(load_manifest(&manifest, 2), Err(DcgnError::Manifest(_))));

        // Duplicate id.
        let dupes = vec![entries[0].clone(), entries[0].clone()];
        write_manifest(&manifest, &dupes).unwrap();
        assert!(matches!(load_manifest(&manifest, 3), Err(DcgnError::Manifest(_))));

        // Missing referenced file.
        let missing =
            vec![ManifestEntry { id: "c".into(), path: "c.bin".into(), labels: vec![] }];
        write_manifest(&manifest, &missing).unwrap();
        assert!(matches!(load_manifest(&manifest, 3), Err(DcgnError::Manifest(_))));
    }

    #[test]
    fn noiseless_shots_equal_their_prototypes() {
        let spec = SynthSpec { shots_per_video: (1, 1), ..small_spec() };
        let prototypes = class_prototypes(&spec);
        let video = synth_video(&spec, &prototypes, 0);
        assert_eq!(video.shot_classes.len(), 1);
        let class = video.shot_classes[0];
        for t in 0..video.frames.rows() {
            assert_eq!(video.frames.row(t), prototypes.row(class));
        }
        assert_eq!(video_labels(&video), vec![class]);
    }

    #[test]
    fn noiseless_corpus_boundaries_are_recovered_by_segmentation() {
        let spec = small_spec();
        let prototypes = class_prototypes(&spec);
        for index in 0..30 {
            let video = synth_video(&spec, &prototypes, index);
            let m = video.shot_classes.len();
            let table = segment_costs(&video.frames);
            let boundaries = kts_fixed(&table, m).unwrap();
            let mut expected = Vec::new();
            let mut acc = 0;
            for &len in &video.shot_lengths[..m - 1] {
                acc += len;
                expected.push(acc);
            }
            assert_eq!(boundaries.cuts, expected, "video {index}");
            // Exactly zero in exact arithmetic; prefix differencing leaves
            // rounding residue for irrational prototype values.
            assert!(segmentation_cost(&table, &boundaries) < 1e-9);
        }
    }

    #[test]
    fn adjacent_shots_never_repeat_a_class() {
        let spec = SynthSpec { noise_std: 0.25, ..small_spec() };
        let prototypes = class_prototypes(&spec);
        for index in 0..50 {
            let video = synth_video(&spec, &prototypes, index);
            for pair in video.shot_classes.windows(2) {
                assert_ne!(pair[0], pair[1], "video {index}");
            }
        }
    }

    #[test]
    fn corpus_generation_is_byte_identical_under_a_seed() {
        let spec = SynthSpec { noise_std: 0.1, ..small_spec() };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let entries_a = synth_corpus(&spec, 12, dir_a.path()).unwrap();
        let entries_b = synth_corpus(&spec, 12, dir_b.path()).unwrap();
        assert_eq!(entries_a, entries_b);
        for entry in &entries_a {
            let a = fs::read(dir_a.path().join(&entry.path)).unwrap();
            let b = fs::read(dir_b.path().join(&entry.path)).unwrap();
            assert_eq!(a, b, "{}", entry.id);
        }
        let a = fs::read_to_string(dir_a.path().join("manifest.jsonl")).unwrap();
        let b = fs::read_to_string(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_are_exactly_the_classes_used() {
        // With zero noise each frame equals its prototype bit-for-bit (after
        // the f32 round-trip), so the classes can be recovered independently.
        let spec = small_spec();
        let dir = tempfile::tempdir().unwrap();
        let entries = synth_corpus(&spec, 10, dir.path()).unwrap();
        let prototypes = class_prototypes(&spec);
        let proto_f32: Vec<Vec<f32>> = (0..spec.num_classes)
            .map(|c| prototypes.row(c).iter().map(|&v| v as f32).collect())
            .collect();
        for entry in &entries {
            let frames = read_features(&dir.path().join(&entry.path)).unwrap();
            let mut seen: Vec<usize> = Vec::new();
            for t in 0..frames.rows() {
                let row: Vec<f32> = frames.row(t).iter().map(|&v| v as f32).collect();
                let class = proto_f32.iter().position(|p| *p == row).expect("frame matches a prototype");
                seen.push(class);
            }
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen, entry.labels, "{}", entry.id);
        }
    }

    #[test]
    fn prototypes_are_unit_and_distinct() {
        let spec = small_spec();
        let p = class_prototypes(&spec);
        for c in 0..spec.num_classes {
            let norm: f64 = p.row(c).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for other in (c + 1)..spec.num_classes {
                assert_ne!(p.row(c), p.row(other));
            }
        }
    }
}
