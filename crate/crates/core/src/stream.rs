//! Synthetic feature streams with per-segment appearance drift, and ingestion
//! of externally produced streams through a manifest file.
//!
//! A synthetic frame holds a disc-shaped object on a noisy background. Inside
//! the disc every *shared* channel carries `shared_amplitude` and the channels
//! owned by the current segment carry `specific_amplitude`. The ground-truth
//! mask is the thresholded response of the segment's generator kernel, which
//! only reads the segment's own channels, so consecutive segments look alike
//! through the shared channels while their labels depend on disjoint ones.
//! From the second segment on, background pixels echo the previous segment's
//! channels at `echo_amplitude`, so fitting a new segment actively overwrites
//! what identified the old one. An optional distractor disc opposite the
//! object (`distractor_amplitude`, off by default) concentrates that echo.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::memory::MemorySlot;
use crate::numerics::{ConvWeights, FeatureGrid, MaskGrid, Rng};
use crate::target_model::TargetModel;

const TAG_FRAME: u64 = 1;
const TAG_HOLDOUT: u64 = 2;
const TAG_PATH: u64 = 3;
const MAX_RESAMPLES: usize = 64;
const MIN_POSITIVE: f64 = 0.05;
const MAX_POSITIVE: f64 = 0.95;
/// Labeled frames per segment used for retrospective evaluation by default.
pub const DEFAULT_HOLDOUT: usize = 21;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Drift {
    /// The appearance and generator switch at the first frame of a segment.
    #[default]
    Abrupt,
    /// Both blend linearly from the previous segment over `transition_frames`.
    Gradual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub segments: usize,
    pub frames_per_segment: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub shared_channels: usize,
    /// Channels owned by each segment; `None` splits the non-shared channels
    /// evenly. Channels owned by no segment carry noise only.
    pub segment_channels: Option<usize>,
    pub shared_amplitude: f64,
    pub specific_amplitude: f64,
    pub object_radius: f64,
    /// Amplitude of the previous segment's channels inside the distractor disc; 0 disables it.
    pub distractor_amplitude: f64,
    /// Amplitude of the previous segment's channels over the rest of the background.
    pub echo_amplitude: f64,
    pub noise_sigma: f64,
    pub threshold: f64,
    pub drift: Drift,
    pub transition_frames: usize,
    pub holdout_per_segment: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            segments: 4,
            frames_per_segment: 100,
            channels: 16,
            height: 16,
            width: 16,
            shared_channels: 4,
            segment_channels: None,
            shared_amplitude: 0.8,
            specific_amplitude: 1.0,
            object_radius: 4.0,
            distractor_amplitude: 0.0,
            echo_amplitude: 0.5,
            noise_sigma: 0.3,
            threshold: 0.5,
            drift: Drift::Abrupt,
            transition_frames: 25,
            holdout_per_segment: DEFAULT_HOLDOUT,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.segments > 0, "stream needs at least one segment");
        ensure!(
            self.frames_per_segment > 0,
            "frames_per_segment must be positive"
        );
        ensure!(
            self.height > 0 && self.width > 0,
            "frame size must be positive"
        );
        ensure!(
            self.shared_channels < self.channels,
            "shared channels must leave room for segment channels"
        );
        ensure!(
            self.specific_channels() > 0
                && self.shared_channels + self.segments * self.specific_channels() <= self.channels,
            "{} non-shared channels cannot hold {} segments of {} channels",
            self.channels - self.shared_channels,
            self.segments,
            self.specific_channels()
        );
        ensure!(
            self.specific_amplitude > 0.0,
            "specific_amplitude must be positive"
        );
        ensure!(
            self.shared_amplitude >= 0.0,
            "shared_amplitude must be nonnegative"
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma must be finite and nonnegative"
        );
        ensure!(self.object_radius > 0.0, "object_radius must be positive");
        ensure!(
            self.distractor_amplitude >= 0.0,
            "distractor_amplitude must be nonnegative"
        );
        ensure!(
            self.echo_amplitude >= 0.0,
            "echo_amplitude must be nonnegative"
        );
        ensure!(
            self.holdout_per_segment > 0,
            "holdout_per_segment must be positive"
        );
        Ok(())
    }

    /// Channels owned by each segment.
    pub fn specific_channels(&self) -> usize {
        self.segment_channels
            .unwrap_or((self.channels - self.shared_channels) / self.segments)
    }

    pub fn len(&self) -> usize {
        self.segments * self.frames_per_segment
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labeled frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub feature: FeatureGrid,
    pub mask: MaskGrid,
    pub segment: usize,
}

/// Random-access view of a finite labeled stream split into segments.
pub trait FrameSource: Sync {
    /// `(C, H, W)` of every feature.
    fn dims(&self) -> (usize, usize, usize);
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn segment_count(&self) -> usize;
    fn segment_of(&self, frame: usize) -> usize;
    fn frame(&self, index: usize) -> Result<Frame>;
    /// Held-out labeled frames of `segment` used for retrospective evaluation.
    fn holdout(&self, segment: usize) -> Result<Vec<Frame>>;
}

/// Sequential reader over any [`FrameSource`].
pub struct StreamCursor<'a> {
    source: &'a dyn FrameSource,
    next: usize,
}

impl<'a> StreamCursor<'a> {
    pub fn new(source: &'a dyn FrameSource) -> Self {
        Self { source, next: 0 }
    }

    pub fn position(&self) -> usize {
        self.next
    }

    pub fn next_frame(&mut self) -> Result<Frame> {
        if self.next >= self.source.len() {
            return Err(Error::EndOfStream);
        }
        let f = self.source.frame(self.next)?;
        self.next += 1;
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSpec {
    /// `1×C×3×3` kernel whose summed response, thresholded at `tau`, is the label.
    pub generator: ConvWeights,
    /// Object displacement from the frame center for each frame of the segment.
    pub path: Vec<(i32, i32)>,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftStream {
    cfg: StreamConfig,
    segments: Vec<SegmentSpec>,
}

impl DriftStream {
    pub fn new(cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let segments = (0..cfg.segments).map(|s| build_segment(&cfg, s)).collect();
        Ok(Self { cfg, segments })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }

    /// Channel range owned by segment `s`.
    pub fn specific_range(&self, s: usize) -> std::ops::Range<usize> {
        let q = self.cfg.specific_channels();
        let start = self.cfg.shared_channels + s * q;
        start..start + q
    }

    /// Blend weights `(segment, weight)` of the appearance at `frame`.
    fn mixture(&self, frame: usize) -> Vec<(usize, f64)> {
        let s = frame / self.cfg.frames_per_segment;
        let local = frame % self.cfg.frames_per_segment;
        if self.cfg.drift == Drift::Gradual && s > 0 && local < self.cfg.transition_frames {
            let a = (local + 1) as f64 / (self.cfg.transition_frames + 1) as f64;
            vec![(s - 1, 1.0 - a), (s, a)]
        } else {
            vec![(s, 1.0)]
        }
    }

    fn render(
        &self,
        mixture: &[(usize, f64)],
        offset: (i32, i32),
        rng: &mut Rng,
    ) -> Result<(FeatureGrid, MaskGrid)> {
        let cfg = &self.cfg;
        let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
        let cy = (h as f64 - 1.0) / 2.0 + offset.0 as f64;
        let cx = (w as f64 - 1.0) / 2.0 + offset.1 as f64;
        let r2 = cfg.object_radius * cfg.object_radius;
        let disc = |cy: f64, cx: f64| -> Vec<bool> {
            (0..h * w)
                .map(|p| {
                    let (y, x) = ((p / w) as f64, (p % w) as f64);
                    (y - cy).powi(2) + (x - cx).powi(2) <= r2
                })
                .collect()
        };
        let inside = disc(cy, cx);
        // Mirrored through the frame center.
        let distractor = disc(h as f64 - 1.0 - cy, w as f64 - 1.0 - cx);
        let mut distractor_amp = vec![0.0; c];
        let mut echo_amp = vec![0.0; c];
        for &(s, a) in mixture {
            if s > 0 {
                for ch in self.specific_range(s - 1) {
                    distractor_amp[ch] += a * cfg.distractor_amplitude;
                    echo_amp[ch] += a * cfg.echo_amplitude;
                }
            }
        }
        let mut amp = vec![0.0; c];
        amp[..cfg.shared_channels]
            .iter_mut()
            .for_each(|a| *a = cfg.shared_amplitude);
        let mut generator = ConvWeights::zeros(1, c);
        let mut tau = 0.0;
        for &(s, a) in mixture {
            for ch in self.specific_range(s) {
                amp[ch] += a * cfg.specific_amplitude;
            }
            for (g, v) in generator
                .data_mut()
                .iter_mut()
                .zip(self.segments[s].generator.data())
            {
                *g += a * v;
            }
            tau += a * self.segments[s].tau;
        }
        let model = TargetModel::from_weights(generator);
        for _ in 0..MAX_RESAMPLES {
            let mut values = Vec::with_capacity(c * h * w);
            for ((&a, &d), &e) in amp.iter().zip(&distractor_amp).zip(&echo_amp) {
                for (&obj, &dis) in inside.iter().zip(&distractor) {
                    let base = if obj {
                        a
                    } else if dis {
                        d
                    } else {
                        e
                    };
                    values.push(base + cfg.noise_sigma * rng.normal());
                }
            }
            let feature = FeatureGrid::new(c, h, w, values)?;
            let mask = model.forward(&feature)?.threshold(tau);
            let frac = mask.positive_fraction();
            if (MIN_POSITIVE..=MAX_POSITIVE).contains(&frac) {
                return Ok((feature, mask));
            }
        }
        Err(Error::Contract(format!(
            "no balanced mask after {MAX_RESAMPLES} draws; enlarge object_radius or lower noise_sigma"
        )))
    }
}

fn build_segment(cfg: &StreamConfig, s: usize) -> SegmentSpec {
    let q = cfg.specific_channels();
    let mut generator = ConvWeights::zeros(1, cfg.channels);
    let tap = 1.0 / (q as f64 * cfg.specific_amplitude);
    for i in 0..q {
        generator.set(0, cfg.shared_channels + s * q + i, 1, 1, tap);
    }
    let mut rng = Rng::derive(cfg.seed, TAG_PATH, s as u64);
    let reach = |extent: usize| {
        ((extent as f64 - 1.0) / 2.0 - cfg.object_radius)
            .floor()
            .max(0.0)
    };
    let (ay, ax) = (reach(cfg.height), reach(cfg.width));
    let (py, px) = (rng.range(30.0, 70.0), rng.range(30.0, 70.0));
    let (fy, fx) = (
        rng.range(0.0, std::f64::consts::TAU),
        rng.range(0.0, std::f64::consts::TAU),
    );
    let path = (0..cfg.frames_per_segment)
        .map(|t| {
            let t = t as f64;
            let dy = (ay * (std::f64::consts::TAU * t / py + fy).sin()).round() as i32;
            let dx = (ax * (std::f64::consts::TAU * t / px + fx).sin()).round() as i32;
            (dy, dx)
        })
        .collect();
    SegmentSpec {
        generator,
        path,
        tau: cfg.threshold,
    }
}

impl FrameSource for DriftStream {
    fn dims(&self) -> (usize, usize, usize) {
        (self.cfg.channels, self.cfg.height, self.cfg.width)
    }

    fn len(&self) -> usize {
        self.cfg.len()
    }

    fn segment_count(&self) -> usize {
        self.cfg.segments
    }

    fn segment_of(&self, frame: usize) -> usize {
        (frame / self.cfg.frames_per_segment).min(self.cfg.segments - 1)
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        if index >= self.len() {
            return Err(Error::EndOfStream);
        }
        let s = self.segment_of(index);
        let offset = self.segments[s].path[index % self.cfg.frames_per_segment];
        let mut rng = Rng::derive(self.cfg.seed, TAG_FRAME, index as u64);
        let (feature, mask) = self.render(&self.mixture(index), offset, &mut rng)?;
        Ok(Frame {
            feature,
            mask,
            segment: s,
        })
    }

    fn holdout(&self, segment: usize) -> Result<Vec<Frame>> {
        ensure!(
            segment < self.cfg.segments,
            "segment {segment} out of range"
        );
        (0..self.cfg.holdout_per_segment)
            .map(|i| {
                let mut rng =
                    Rng::derive(self.cfg.seed, TAG_HOLDOUT, (segment * 1_000_003 + i) as u64);
                let local = rng.below(self.cfg.frames_per_segment);
                let offset = self.segments[segment].path[local];
                let (feature, mask) = self.render(&[(segment, 1.0)], offset, &mut rng)?;
                Ok(Frame {
                    feature,
                    mask,
                    segment,
                })
            })
            .collect()
    }
}

/// A stream read from a manifest.
///
/// The manifest is a text file with one directive per line (`#` starts a comment):
///
/// ```text
/// dims <C> <H> <W>
/// segments <first frame of segment 0> <first frame of segment 1> ...
/// frame <path to a one-record file>
/// holdout <segment> <path to a one-record file>
/// ```
///
/// Record files use the memory-dump record layout; only the feature and mask
/// are used. Paths are relative to the manifest. Segments without `holdout`
/// lines are evaluated on up to 21 evenly spaced frames of the segment.
#[derive(Clone, Debug)]
pub struct ManifestStream {
    dims: (usize, usize, usize),
    starts: Vec<usize>,
    frames: Vec<(FeatureGrid, MaskGrid)>,
    holdouts: Vec<Vec<(FeatureGrid, MaskGrid)>>,
}

fn read_record(path: &Path, dims: (usize, usize, usize)) -> Result<(FeatureGrid, MaskGrid)> {
    let bytes = fs::read(path)?;
    let slot = MemorySlot::read_from(&mut bytes.as_slice(), dims)?
        .ok_or_else(|| Error::Format(format!("{} holds no record", path.display())))?;
    Ok((slot.feature, slot.mask))
}

impl ManifestStream {
    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut dims = None;
        let mut starts = None;
        let mut frame_paths = Vec::new();
        let mut holdout_paths: Vec<(usize, PathBuf)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), lineno + 1));
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            let nums = || {
                rest.iter()
                    .map(|v| v.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
            };
            match key {
                "dims" => {
                    let v = nums().map_err(|_| bad("dims expects three integers"))?;
                    if v.len() != 3 || v.contains(&0) {
                        return Err(bad("dims expects three positive integers"));
                    }
                    dims = Some((v[0], v[1], v[2]));
                }
                "segments" => {
                    starts = Some(nums().map_err(|_| bad("segments expects integers"))?);
                }
                "frame" => {
                    let [p] = rest[..] else {
                        return Err(bad("frame expects one path"));
                    };
                    frame_paths.push(base.join(p));
                }
                "holdout" => {
                    let [s, p] = rest[..] else {
                        return Err(bad("holdout expects a segment and a path"));
                    };
                    let s = s
                        .parse()
                        .map_err(|_| bad("holdout segment must be an integer"))?;
                    holdout_paths.push((s, base.join(p)));
                }
                other => return Err(bad(&format!("unknown directive `{other}`"))),
            }
        }
        let dims = dims.ok_or_else(|| Error::Format("manifest lacks a dims line".into()))?;
        let starts = starts.unwrap_or_else(|| vec![0]);
        ensure!(!frame_paths.is_empty(), "manifest lists no frames");
        ensure!(
            starts.first() == Some(&0) && starts.windows(2).all(|w| w[0] < w[1]),
            "segment starts must begin at 0 and increase strictly"
        );
        ensure!(
            *starts.last().unwrap() < frame_paths.len(),
            "segment start beyond the last frame"
        );
        let frames = frame_paths
            .iter()
            .map(|p| read_record(p, dims))
            .collect::<Result<Vec<_>>>()?;
        let mut holdouts = vec![Vec::new(); starts.len()];
        for (s, p) in &holdout_paths {
            ensure!(*s < starts.len(), "holdout segment {s} out of range");
            holdouts[*s].push(read_record(p, dims)?);
        }
        let mut stream = Self {
            dims,
            starts,
            frames,
            holdouts,
        };
        for s in 0..stream.starts.len() {
            if stream.holdouts[s].is_empty() {
                let range = stream.segment_range(s);
                let n = range.len().min(DEFAULT_HOLDOUT);
                stream.holdouts[s] = (0..n)
                    .map(|i| stream.frames[range.start + i * range.len() / n].clone())
                    .collect();
            }
        }
        Ok(stream)
    }

    fn segment_range(&self, s: usize) -> std::ops::Range<usize> {
        let end = self.starts.get(s + 1).copied().unwrap_or(self.frames.len());
        self.starts[s]..end
    }
}

impl FrameSource for ManifestStream {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn len(&self) -> usize {
        self.frames.len()
    }

    fn segment_count(&self) -> usize {
        self.starts.len()
    }

    fn segment_of(&self, frame: usize) -> usize {
        self.starts.partition_point(|&s| s <= frame) - 1
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let (feature, mask) = self.frames.get(index).cloned().ok_or(Error::EndOfStream)?;
        Ok(Frame {
            feature,
            mask,
            segment: self.segment_of(index),
        })
    }

    fn holdout(&self, segment: usize) -> Result<Vec<Frame>> {
        ensure!(
            segment < self.starts.len(),
            "segment {segment} out of range"
        );
        Ok(self.holdouts[segment]
            .iter()
            .map(|(feature, mask)| Frame {
                feature: feature.clone(),
                mask: mask.clone(),
                segment,
            })
            .collect())
    }
}

/// Writes `source` as a manifest plus one record file per frame and holdout frame.
pub fn export_manifest(source: &dyn FrameSource, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("frames"))?;
    let (c, h, w) = source.dims();
    let mut text = format!("dims {c} {h} {w}\n");
    let mut starts = Vec::new();
    for f in 0..source.len() {
        if f == 0 || source.segment_of(f) != source.segment_of(f - 1) {
            starts.push(f.to_string());
        }
    }
    text.push_str(&format!("segments {}\n", starts.join(" ")));
    let write = |rel: String, frame: &Frame, index: u64| -> Result<String> {
        let slot = MemorySlot::new(frame.feature.clone(), frame.mask.clone(), index, 0, false)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(&rel))?);
        slot.write_to(&mut out)?;
        Ok(rel)
    };
    for f in 0..source.len() {
        let rel = write(format!("frames/{f:06}.bin"), &source.frame(f)?, f as u64)?;
        text.push_str(&format!("frame {rel}\n"));
    }
    for s in 0..source.segment_count() {
        for (i, frame) in source.holdout(s)?.iter().enumerate() {
            let rel = write(format!("frames/holdout_{s:03}_{i:03}.bin"), frame, i as u64)?;
            text.push_str(&format!("holdout {s} {rel}\n"));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> StreamConfig {
        StreamConfig {
            segments: 2,
            frames_per_segment: 6,
            holdout_per_segment: 3,
            seed,
            ..Default::default()
        }
    }

    fn jaccard(a: &MaskGrid, b: &MaskGrid) -> f64 {
        let (a, b) = (a.bits(), b.bits());
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn noiseless_masks_follow_the_path() {
        let cfg = StreamConfig {
            noise_sigma: 0.0,
            segments: 1,
            frames_per_segment: 20,
            ..Default::default()
        };
        let a = DriftStream::new(cfg.clone()).unwrap();
        let b = DriftStream::new(cfg).unwrap();
        for f in 0..20 {
            let (fa, fb) = (a.frame(f).unwrap(), b.frame(f).unwrap());
            assert_eq!(fa, fb);
            // Without noise the mask is exactly the rendered disc.
            let disc: Vec<bool> = fa.feature.channel(4).iter().map(|&v| v > 0.0).collect();
            assert_eq!(fa.mask.bits(), disc);
        }
    }

    #[test]
    fn regenerated_stream_is_bit_identical() {
        let a = DriftStream::new(small(5)).unwrap();
        let b = DriftStream::new(small(5)).unwrap();
        let c = DriftStream::new(small(6)).unwrap();
        for f in 0..a.len() {
            assert_eq!(a.frame(f).unwrap(), b.frame(f).unwrap());
        }
        assert_ne!(a.frame(0).unwrap(), c.frame(0).unwrap());
    }

    #[test]
    fn generator_model_reproduces_labels() {
        let s = DriftStream::new(small(1)).unwrap();
        let model = TargetModel::from_weights(s.segments()[1].generator.clone());
        let f = s.frame(7).unwrap();
        assert_eq!(model.forward(&f.feature).unwrap().threshold(0.5), f.mask);
    }

    #[test]
    fn orthogonal_generator_is_no_better_than_chance_on_next_segment() {
        let s = DriftStream::new(small(2)).unwrap();
        let fit = TargetModel::from_weights(s.segments()[0].generator.clone());
        let first = s.frame(6).unwrap();
        assert_eq!(first.segment, 1);
        let pred = fit.predict_mask(&first.feature, 0.5).unwrap();
        let all = MaskGrid::from_bits(16, 16, &[true; 256]).unwrap();
        assert!(jaccard(&pred, &first.mask) <= jaccard(&all, &first.mask));
    }

    #[test]
    fn cursor_reaches_end_of_stream() {
        let s = DriftStream::new(small(3)).unwrap();
        let mut cur = StreamCursor::new(&s);
        for f in 0..12 {
            assert_eq!(cur.next_frame().unwrap(), s.frame(f).unwrap());
        }
        assert!(matches!(cur.next_frame(), Err(Error::EndOfStream)));
    }

    #[test]
    fn holdout_counts_and_determinism() {
        let cfg = StreamConfig {
            segments: 3,
            frames_per_segment: 5,
            holdout_per_segment: 1,
            ..Default::default()
        };
        let s = DriftStream::new(cfg).unwrap();
        let total: usize = (0..3).map(|i| s.holdout(i).unwrap().len()).sum();
        assert_eq!(total, 3);
        let d = DriftStream::new(StreamConfig {
            frames_per_segment: 10,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(d.holdout(0).unwrap().len(), 21);
        assert_eq!(d.holdout(2).unwrap(), d.holdout(2).unwrap());
        assert_ne!(
            d.holdout(2).unwrap()[0].feature,
            d.frame(0).unwrap().feature
        );
    }

    #[test]
    fn masks_are_balanced() {
        let s = DriftStream::new(StreamConfig {
            frames_per_segment: 25,
            ..Default::default()
        })
        .unwrap();
        for f in 0..s.len() {
            let frac = s.frame(f).unwrap().mask.positive_fraction();
            assert!((0.05..=0.95).contains(&frac));
        }
    }

    #[test]
    fn gradual_drift_blends_channels() {
        let cfg = StreamConfig {
            drift: Drift::Gradual,
            noise_sigma: 0.0,
            transition_frames: 3,
            ..small(0)
        };
        let s = DriftStream::new(cfg).unwrap();
        let f = s.frame(6).unwrap();
        let peak = |range: std::ops::Range<usize>| {
            range
                .map(|c| f.feature.channel(c).iter().copied().fold(0.0, f64::max))
                .fold(0.0, f64::max)
        };
        assert!((peak(s.specific_range(0)) - 0.75).abs() < 1e-12);
        assert!((peak(s.specific_range(1)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DriftStream::new(StreamConfig {
            segments: 0,
            ..Default::default()
        })
        .is_err());
        assert!(DriftStream::new(StreamConfig {
            segments: 13,
            ..Default::default()
        })
        .is_err());
        assert!(DriftStream::new(StreamConfig {
            noise_sigma: -1.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let s = DriftStream::new(small(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = export_manifest(&s, dir.path()).unwrap();
        let m = ManifestStream::open(&path).unwrap();
        assert_eq!(m.len(), s.len());
        assert_eq!(m.segment_count(), 2);
        for f in 0..s.len() {
            assert_eq!(m.frame(f).unwrap(), s.frame(f).unwrap());
        }
        assert_eq!(m.holdout(1).unwrap(), s.holdout(1).unwrap());
    }

    #[test]
    fn manifest_errors_and_default_holdouts() {
        let s = DriftStream::new(small(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = export_manifest(&s, dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let trimmed: String = text
            .lines()
            .filter(|l| !l.starts_with("holdout"))
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&path, trimmed).unwrap();
        let m = ManifestStream::open(&path).unwrap();
        assert_eq!(m.holdout(0).unwrap().len(), 6);
        assert_eq!(m.segment_of(5), 0);
        assert_eq!(m.segment_of(6), 1);

        fs::write(&path, "dims 1 2\n").unwrap();
        assert!(ManifestStream::open(&path).is_err());
        fs::write(&path, "dims 16 16 16\nbogus 1\n").unwrap();
        assert!(ManifestStream::open(&path).is_err());
    }
}
