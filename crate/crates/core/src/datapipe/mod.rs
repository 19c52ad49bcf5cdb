//! Dataset ingestion, clip sampling, augmentation and batch planning.

mod augment;
mod batch;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;

pub use augment::{augment, AugmentParams, AugmentationPolicy, Jitter, PhotometricParams, ScalePolicy};
pub use batch::{batch_iterator, epoch_keys, Batch, BatchEntry, BatchIterator, ClipKey};

/// A temporal window of blurry frames and the sharp center frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    blurry: Vec<Image>,
    sharp: Image,
    sequence_id: String,
    center_index: usize,
}

impl VideoClip {
    pub fn new(blurry: Vec<Image>, sharp: Image, sequence_id: impl Into<String>, center_index: usize) -> Result<Self> {
        if blurry.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "a clip needs an odd number of frames, got {}",
                blurry.len()
            )));
        }
        if blurry.iter().any(|f| !f.same_dims(&sharp)) {
            return Err(Error::Shape("all clip frames must match the sharp reference".into()));
        }
        Ok(Self {
            blurry,
            sharp,
            sequence_id: sequence_id.into(),
            center_index,
        })
    }

    pub fn blurry_frames(&self) -> &[Image] {
        &self.blurry
    }

    pub fn center_frame(&self) -> &Image {
        &self.blurry[self.blurry.len() / 2]
    }

    pub fn sharp_reference(&self) -> &Image {
        &self.sharp
    }

    pub fn sequence_id(&self) -> &str {
        &self.sequence_id
    }

    pub fn center_index(&self) -> usize {
        self.center_index
    }

    pub fn len(&self) -> usize {
        self.blurry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blurry.is_empty()
    }

    pub fn height(&self) -> usize {
        self.sharp.height()
    }

    pub fn width(&self) -> usize {
        self.sharp.width()
    }

    pub fn into_parts(self) -> (Vec<Image>, Image) {
        (self.blurry, self.sharp)
    }
}

/// Center positions with a full window of `seq_len` frames.
pub fn valid_centers(frames: usize, seq_len: usize) -> std::ops::Range<usize> {
    let half = seq_len / 2;
    if frames < seq_len || seq_len == 0 {
        0..0
    } else {
        half..frames - half
    }
}

/// Anything that can hand out blurry/sharp frame pairs by sequence.
pub trait ClipSource: Send + Sync {
    /// `(sequence id, frame count)` in a stable order.
    fn sequences(&self) -> Vec<(String, usize)>;
    fn blurry_frame(&self, sequence: usize, frame: usize) -> Result<Image>;
    fn sharp_frame(&self, sequence: usize, frame: usize) -> Result<Image>;

    fn sequence_position(&self, id: &str) -> Result<usize> {
        self.sequences()
            .iter()
            .position(|(s, _)| s == id)
            .ok_or_else(|| Error::Dataset(format!("unknown sequence `{id}`")))
    }
}

/// Loads the window of `seq_len` frames centered on `center`.
pub fn sample_clip(source: &dyn ClipSource, sequence_id: &str, center: usize, seq_len: usize) -> Result<VideoClip> {
    let seq = source.sequence_position(sequence_id)?;
    sample_clip_at(source, seq, center, seq_len)
}

pub fn sample_clip_at(source: &dyn ClipSource, seq: usize, center: usize, seq_len: usize) -> Result<VideoClip> {
    if seq_len % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "sequence length must be odd, got {seq_len}"
        )));
    }
    let sequences = source.sequences();
    let (id, frames) = sequences
        .get(seq)
        .ok_or_else(|| Error::Dataset(format!("sequence index {seq} out of range")))?;
    let half = (seq_len / 2) as i64;
    let (start, end) = (center as i64 - half, center as i64 + half);
    if start < 0 || end >= *frames as i64 {
        return Err(Error::WindowOutOfRange {
            sequence: id.clone(),
            start,
            end,
            frames: *frames,
        });
    }
    let blurry = (start..=end)
        .map(|f| source.blurry_frame(seq, f as usize))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(blurry, source.sharp_frame(seq, center)?, id.clone(), center)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEntry {
    pub id: String,
    pub blurry: Vec<PathBuf>,
    pub sharp: Vec<PathBuf>,
}

/// Frame paths of one dataset split laid out as
/// `<split>/<sequence>/{blurry,sharp}/NNNNN.png`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    root: PathBuf,
    sequences: Vec<SequenceEntry>,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Indexes every sequence directory under `split_dir`.
pub fn scan_dataset(split_dir: &Path) -> Result<DatasetIndex> {
    if !split_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            split_dir.display()
        )));
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(split_dir).map_err(|e| Error::io(split_dir, e))? {
        let path = entry.map_err(|e| Error::io(split_dir, e))?.path();
        if path.join("blurry").is_dir() || path.join("sharp").is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let mut sequences = Vec::new();
    for dir in dirs {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let blurry_dir = dir.join("blurry");
        let sharp_dir = dir.join("sharp");
        if !blurry_dir.is_dir() || !sharp_dir.is_dir() {
            return Err(Error::Dataset(format!(
                "sequence `{id}` needs both blurry/ and sharp/ directories"
            )));
        }
        let blurry = list_pngs(&blurry_dir)?;
        let sharp = list_pngs(&sharp_dir)?;
        for b in &blurry {
            let name = b.file_name().unwrap_or_default();
            if !sharp_dir.join(name).is_file() {
                return Err(Error::Dataset(format!(
                    "sequence `{id}`: no sharp counterpart for {}",
                    b.display()
                )));
            }
        }
        if blurry.len() != sharp.len() {
            return Err(Error::Dataset(format!(
                "sequence `{id}`: {} blurry but {} sharp frames",
                blurry.len(),
                sharp.len()
            )));
        }
        if blurry.is_empty() {
            continue;
        }
        sequences.push(SequenceEntry { id, blurry, sharp });
    }
    if sequences.is_empty() {
        return Err(Error::Dataset(format!(
            "no sequences found under {}",
            split_dir.display()
        )));
    }
    Ok(DatasetIndex {
        root: split_dir.to_path_buf(),
        sequences,
    })
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[SequenceEntry] {
        &self.sequences
    }

    pub fn frame_count(&self, id: &str) -> Option<usize> {
        self.sequences.iter().find(|s| s.id == id).map(|s| s.blurry.len())
    }

    /// Decodes every frame once.
    pub fn load_into_memory(&self) -> Result<InMemoryDataset> {
        let mut ds = InMemoryDataset::default();
        for s in &self.sequences {
            let blurry = s.blurry.iter().map(|p| Image::load_rgb(p)).collect::<Result<Vec<_>>>()?;
            let sharp = s.sharp.iter().map(|p| Image::load_rgb(p)).collect::<Result<Vec<_>>>()?;
            ds.push(s.id.clone(), blurry, sharp)?;
        }
        Ok(ds)
    }

    fn entry(&self, seq: usize) -> Result<&SequenceEntry> {
        self.sequences
            .get(seq)
            .ok_or_else(|| Error::Dataset(format!("sequence index {seq} out of range")))
    }
}

impl ClipSource for DatasetIndex {
    fn sequences(&self) -> Vec<(String, usize)> {
        self.sequences.iter().map(|s| (s.id.clone(), s.blurry.len())).collect()
    }

    fn blurry_frame(&self, sequence: usize, frame: usize) -> Result<Image> {
        let e = self.entry(sequence)?;
        let p = e
            .blurry
            .get(frame)
            .ok_or_else(|| Error::Dataset(format!("`{}` has no frame {frame}", e.id)))?;
        Image::load_rgb(p)
    }

    fn sharp_frame(&self, sequence: usize, frame: usize) -> Result<Image> {
        let e = self.entry(sequence)?;
        let p = e
            .sharp
            .get(frame)
            .ok_or_else(|| Error::Dataset(format!("`{}` has no frame {frame}", e.id)))?;
        Image::load_rgb(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MemorySequence {
    id: String,
    blurry: Vec<Image>,
    sharp: Vec<Image>,
}

/// Fully decoded dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InMemoryDataset {
    sequences: Vec<MemorySequence>,
}

impl InMemoryDataset {
    pub fn push(&mut self, id: impl Into<String>, blurry: Vec<Image>, sharp: Vec<Image>) -> Result<()> {
        let id = id.into();
        if blurry.len() != sharp.len() {
            return Err(Error::Dataset(format!(
                "sequence `{id}`: {} blurry but {} sharp frames",
                blurry.len(),
                sharp.len()
            )));
        }
        self.sequences.push(MemorySequence { id, blurry, sharp });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// All `(blurry, sharp)` pairs in sequence order.
    pub fn pairs(&self) -> impl Iterator<Item = (&Image, &Image)> {
        self.sequences.iter().flat_map(|s| s.blurry.iter().zip(&s.sharp))
    }

    fn seq(&self, i: usize) -> Result<&MemorySequence> {
        self.sequences
            .get(i)
            .ok_or_else(|| Error::Dataset(format!("sequence index {i} out of range")))
    }
}

impl ClipSource for InMemoryDataset {
    fn sequences(&self) -> Vec<(String, usize)> {
        self.sequences.iter().map(|s| (s.id.clone(), s.blurry.len())).collect()
    }

    fn blurry_frame(&self, sequence: usize, frame: usize) -> Result<Image> {
        let s = self.seq(sequence)?;
        s.blurry
            .get(frame)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("`{}` has no frame {frame}", s.id)))
    }

    fn sharp_frame(&self, sequence: usize, frame: usize) -> Result<Image> {
        let s = self.seq(sequence)?;
        s.sharp
            .get(frame)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("`{}` has no frame {frame}", s.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize, tag: f32) -> Vec<Image> {
        (0..n).map(|i| Image::filled(3, 4, 4, tag + i as f32 / 100.0)).collect()
    }

    fn dataset(len: usize) -> InMemoryDataset {
        let mut ds = InMemoryDataset::default();
        ds.push("a", frames(len, 0.0), frames(len, 0.5)).unwrap();
        ds
    }

    #[test]
    fn valid_center_enumeration() {
        let centers: Vec<_> = valid_centers(10, 5).collect();
        assert_eq!(centers, vec![2, 3, 4, 5, 6, 7]);
        assert_eq!(valid_centers(10, 1).count(), 10);
        assert_eq!(valid_centers(3, 5).count(), 0);
    }

    #[test]
    fn window_bounds() {
        let ds = dataset(10);
        let clip = sample_clip(&ds, "a", 2, 5).unwrap();
        assert_eq!(clip.len(), 5);
        assert_eq!(clip.blurry_frames()[0].get(0, 0, 0), 0.0);
        assert_eq!(clip.center_frame().get(0, 0, 0), 0.02);
        assert_eq!(clip.sharp_reference().get(0, 0, 0), 0.52);
        assert!(matches!(
            sample_clip(&ds, "a", 2, 7),
            Err(Error::WindowOutOfRange { start: -1, .. })
        ));
        assert!(sample_clip(&ds, "a", 8, 5).is_err());
        assert!(sample_clip(&ds, "a", 2, 4).is_err());
        assert!(sample_clip(&ds, "b", 2, 5).is_err());
        let single = sample_clip(&ds, "a", 0, 1).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn scan_layout() {
        let dir = tempfile::tempdir().unwrap();
        for seq in ["s0", "s1"] {
            for kind in ["blurry", "sharp"] {
                let d = dir.path().join(seq).join(kind);
                fs::create_dir_all(&d).unwrap();
                for i in 0..10 {
                    Image::filled(3, 2, 2, 0.5).save_rgb(&d.join(format!("{i:05}.png"))).unwrap();
                }
            }
        }
        let idx = scan_dataset(dir.path()).unwrap();
        assert_eq!(idx.entries().len(), 2);
        assert_eq!(idx.frame_count("s1"), Some(10));
        let clip = sample_clip(&idx, "s0", 5, 3).unwrap();
        assert_eq!(clip.center_frame().get(1, 1, 1), 128.0 / 255.0);

        fs::remove_file(dir.path().join("s1/sharp/00004.png")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("00004.png"), "{err}");
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset(dir.path()).is_err());
        assert!(scan_dataset(&dir.path().join("missing")).is_err());
    }
}
