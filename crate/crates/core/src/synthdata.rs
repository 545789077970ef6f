//! Synthetic moving-shape videos with compositional captions and exact flow.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

macro_rules! vocab_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

vocab_enum!(ShapeKind { Circle => "circle", Square => "square", Triangle => "triangle", Star => "star" });
vocab_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
vocab_enum!(Size { Big => "big", Small => "small" });
vocab_enum!(Motion { Moves => "moves", Slides => "slides", Bounces => "bounces", Drifts => "drifts" });
vocab_enum!(Direction { Left => "left", Right => "right", Up => "up", Down => "down" });
vocab_enum!(Speed { Slowly => "slowly", Quickly => "quickly" });
vocab_enum!(Background { Plain => "plain", Striped => "striped" });

impl Direction {
    /// Unit step `(dx, dy)`; y grows downward.
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

impl Speed {
    pub fn pixels(self) -> usize {
        match self {
            Speed::Slowly => 1,
            Speed::Quickly => 3,
        }
    }
}

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: Size,
    pub motion: Motion,
    pub direction: Direction,
    pub speed: Speed,
    pub background: Background,
}

/// Caption template. Slot words are substituted in order.
pub const CAPTION_TEMPLATE: &str = "a {size} {color} {shape} {motion} {speed} toward the {direction} on the {background} background";

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} {} {} toward the {} on the {} background",
            self.size.word(),
            self.color.word(),
            self.shape.word(),
            self.motion.word(),
            self.speed.word(),
            self.direction.word(),
            self.background.word()
        )
    }

    /// Parses a caption produced by [`SceneSpec::caption`].
    pub fn from_caption(caption: &str) -> Option<SceneSpec> {
        let w: Vec<&str> = caption.split_whitespace().collect();
        if w.len() != 13 || w[0] != "a" || w[6] != "toward" || w[7] != "the" || w[9] != "on" || w[10] != "the" || w[12] != "background" {
            return None;
        }
        Some(SceneSpec {
            size: Size::from_word(w[1])?,
            color: Color::from_word(w[2])?,
            shape: ShapeKind::from_word(w[3])?,
            motion: Motion::from_word(w[4])?,
            speed: Speed::from_word(w[5])?,
            direction: Direction::from_word(w[8])?,
            background: Background::from_word(w[11])?,
        })
    }

    /// Every scene in the vocabulary, in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(4096);
        for &shape in ShapeKind::ALL {
            for &color in Color::ALL {
                for &size in Size::ALL {
                    for &motion in Motion::ALL {
                        for &direction in Direction::ALL {
                            for &speed in Speed::ALL {
                                for &background in Background::ALL {
                                    out.push(SceneSpec { shape, color, size, motion, direction, speed, background });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
        fn pick<T: Copy, R: Rng + ?Sized>(rng: &mut R, xs: &[T]) -> T {
            xs[rng.random_range(0..xs.len())]
        }
        SceneSpec {
            shape: pick(rng, ShapeKind::ALL),
            color: pick(rng, Color::ALL),
            size: pick(rng, Size::ALL),
            motion: pick(rng, Motion::ALL),
            direction: pick(rng, Direction::ALL),
            speed: pick(rng, Speed::ALL),
            background: pick(rng, Background::ALL),
        }
    }
}

/// Every word that can appear in a corpus caption.
pub fn corpus_words() -> Vec<&'static str> {
    let mut words = vec!["a", "toward", "the", "on", "background"];
    words.extend(Size::ALL.iter().map(|v| v.word()));
    words.extend(Color::ALL.iter().map(|v| v.word()));
    words.extend(ShapeKind::ALL.iter().map(|v| v.word()));
    words.extend(Motion::ALL.iter().map(|v| v.word()));
    words.extend(Speed::ALL.iter().map(|v| v.word()));
    words.extend(Direction::ALL.iter().map(|v| v.word()));
    words.extend(Background::ALL.iter().map(|v| v.word()));
    words
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    /// `[F, C, H, W]` in `[0, 1]`.
    pub frames: Array4<f32>,
    pub caption: String,
    /// `[F-1, 2, H, W]` in pixels per frame, x component first.
    pub flow_gt: Option<Array4<f32>>,
    pub clip_id: String,
    pub seed: u64,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.frames.dim();
        (h, w)
    }

    /// The frame used as the clip's still image.
    pub fn middle_frame(&self) -> ndarray::ArrayView3<'_, f32> {
        self.frames.slice(s![self.num_frames() / 2, .., .., ..])
    }
}

fn shape_side(size: Size, h: usize, w: usize) -> usize {
    let m = h.min(w) as f64;
    match size {
        Size::Big => (0.375 * m).round().max(4.0) as usize,
        Size::Small => (0.22 * m).round().max(3.0) as usize,
    }
}

/// Binary `side x side` mask of a shape.
pub fn shape_mask(kind: ShapeKind, side: usize) -> Vec<bool> {
    let n = side as f64;
    let c = (n - 1.0) / 2.0;
    let mut m = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 - c, y as f64 - c);
            m[y * side + x] = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => fx * fx + fy * fy <= (n / 2.0) * (n / 2.0),
                ShapeKind::Triangle => {
                    let half = (y as f64 + 1.0) / n * (n / 2.0);
                    (x as f64 + 0.5 - n / 2.0).abs() <= half
                }
                ShapeKind::Star => {
                    let r = (fx * fx + fy * fy).sqrt();
                    let theta = fy.atan2(fx) + std::f64::consts::FRAC_PI_2;
                    r <= (n / 2.0) * (0.55 + 0.45 * (5.0 * theta).cos())
                }
            };
        }
    }
    m
}

fn background_value(bg: Background, y: usize) -> f32 {
    match bg {
        Background::Plain => 0.1,
        Background::Striped => {
            if (y / 2) % 2 == 0 {
                0.1
            } else {
                0.3
            }
        }
    }
}

/// Position of the shape's top-left corner along one axis at frame `t`.
fn axis_position(start: usize, step: i64, t: usize, extent: usize, side: usize, bounce: bool) -> i64 {
    let raw = start as i64 + step * t as i64;
    if bounce {
        let m = (extent - side) as i64;
        if m == 0 {
            return 0;
        }
        let p = raw.rem_euclid(2 * m);
        if p > m {
            2 * m - p
        } else {
            p
        }
    } else {
        raw.rem_euclid(extent as i64)
    }
}

/// Renders a clip with the displacement implied by `spec.speed`.
pub fn render_clip(spec: &SceneSpec, f: usize, h: usize, w: usize, seed: u64) -> Result<VideoClip> {
    render_clip_with_speed(spec, f, h, w, seed, spec.speed.pixels())
}

/// Renders a clip with an explicit per-frame displacement `d` (0 gives a
/// static clip).
///
/// Non-bouncing shapes move on a torus: pixels leaving one border re-enter at
/// the opposite one, so the displacement is the same on every frame.
pub fn render_clip_with_speed(spec: &SceneSpec, f: usize, h: usize, w: usize, seed: u64, d: usize) -> Result<VideoClip> {
    if f < 2 || h < 8 || w < 8 {
        return Err(Error::Config(format!("clip needs F >= 2 and H, W >= 8, got {f}x{h}x{w}")));
    }
    let side = shape_side(spec.size, h, w);
    if side >= h || side >= w {
        return Err(Error::Config(format!("shape of side {side} does not fit in {h}x{w}")));
    }
    let mask = shape_mask(spec.shape, side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=w - side);
    let y0 = rng.random_range(0..=h - side);
    let (ux, uy) = spec.direction.unit();
    let bounce = spec.motion == Motion::Bounces;
    let (sx, sy) = (ux * d as i64, uy * d as i64);
    let pos = |t: usize| {
        (axis_position(x0, sx, t, w, side, bounce), axis_position(y0, sy, t, h, side, bounce))
    };
    let rgb = spec.color.rgb();
    let mut frames = Array4::<f32>::zeros((f, 3, h, w));
    let mut flow = Array4::<f32>::zeros((f - 1, 2, h, w));
    for t in 0..f {
        for y in 0..h {
            let bg = background_value(spec.background, y);
            for c in 0..3 {
                frames.slice_mut(s![t, c, y, ..]).fill(bg);
            }
        }
        let (px, py) = pos(t);
        let disp = if t + 1 < f {
            if bounce {
                let (nx, ny) = pos(t + 1);
                Some(((nx - px) as f32, (ny - py) as f32))
            } else {
                Some((sx as f32, sy as f32))
            }
        } else {
            None
        };
        for my in 0..side {
            for mx in 0..side {
                if !mask[my * side + mx] {
                    continue;
                }
                let x = (px + mx as i64).rem_euclid(w as i64) as usize;
                let y = (py + my as i64).rem_euclid(h as i64) as usize;
                for c in 0..3 {
                    frames[[t, c, y, x]] = rgb[c];
                }
                if let Some((dx, dy)) = disp {
                    flow[[t, 0, y, x]] = dx;
                    flow[[t, 1, y, x]] = dy;
                }
            }
        }
    }
    Ok(VideoClip { frames, caption: spec.caption(), flow_gt: Some(flow), clip_id: String::new(), seed })
}

/// Per-clip seed derived from the corpus seed.
fn clip_seed(corpus_seed: u64, index: usize) -> u64 {
    let mut z = corpus_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `n` scene specs uniformly and renders them in memory.
pub fn generate_clips(n: usize, f: usize, h: usize, w: usize, seed: u64) -> Result<Vec<(SceneSpec, VideoClip)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let spec = SceneSpec::sample(&mut rng);
            let cs = clip_seed(seed, i);
            let mut clip = render_clip(&spec, f, h, w, cs)?;
            clip.clip_id = format!("clip_{i:05}");
            Ok((spec, clip))
        })
        .collect()
}

pub const CLIP_MAGIC: i32 = 0x4D4F_4544;
pub const CLIP_VERSION: i32 = 1;
const HEADER_BYTES: usize = 32;

/// Serializes a clip: 8 little-endian i32 header values, then frames, then
/// flow (if present), as little-endian f32.
pub fn encode_clip(clip: &VideoClip) -> Vec<u8> {
    let (f, c, h, w) = clip.frames.dim();
    let header = [CLIP_MAGIC, CLIP_VERSION, f as i32, c as i32, h as i32, w as i32, clip.flow_gt.is_some() as i32, 0];
    let n_flow = clip.flow_gt.as_ref().map_or(0, |a| a.len());
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * (clip.frames.len() + n_flow));
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in clip.frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(flow) = &clip.flow_gt {
        for v in flow.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the frames and flow of a serialized clip.
pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<(Array4<f32>, Option<Array4<f32>>)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::corrupt(path, "truncated header"));
    }
    let header: Vec<i32> = bytes[..HEADER_BYTES].chunks(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect();
    if header[0] != CLIP_MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    if header[1] != CLIP_VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {}", header[1])));
    }
    if header[2..6].iter().any(|&v| v <= 0) {
        return Err(Error::corrupt(path, "non-positive dimension"));
    }
    let (f, c, h, w) = (header[2] as usize, header[3] as usize, header[4] as usize, header[5] as usize);
    let n_frames = f * c * h * w;
    let n_flow = if header[6] != 0 { (f - 1) * 2 * h * w } else { 0 };
    if bytes.len() != HEADER_BYTES + 4 * (n_frames + n_flow) {
        return Err(Error::corrupt(path, "payload size does not match header"));
    }
    let floats: Vec<f32> = bytes[HEADER_BYTES..].chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let frames = Array4::from_shape_vec((f, c, h, w), floats[..n_frames].to_vec()).expect("sized above");
    let flow = (n_flow > 0).then(|| Array4::from_shape_vec((f - 1, 2, h, w), floats[n_frames..].to_vec()).expect("sized above"));
    Ok((frames, flow))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub caption: String,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// SHA-256 of the clip file.
    pub checksum: String,
    /// Path relative to the corpus directory.
    pub path: String,
    pub frames_offset: usize,
    pub flow_offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one clip file and returns its manifest entry.
pub fn write_clip(dir: &Path, rel: &str, clip: &VideoClip) -> Result<ManifestEntry> {
    let bytes = encode_clip(clip);
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    let (f, c, h, w) = clip.frames.dim();
    Ok(ManifestEntry {
        clip_id: clip.clip_id.clone(),
        caption: clip.caption.clone(),
        frames: f,
        channels: c,
        height: h,
        width: w,
        seed: clip.seed,
        checksum: sha256_hex(&bytes),
        path: rel.to_string(),
        frames_offset: HEADER_BYTES,
        flow_offset: clip.flow_gt.as_ref().map(|_| HEADER_BYTES + 4 * clip.frames.len()),
    })
}

/// Writes a manifest for already-written entries, rejecting duplicate ids.
pub fn write_manifest(dir: &Path, manifest: &CorpusManifest) -> Result<()> {
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(&e.clip_id) {
            return Err(Error::Config(format!("duplicate clip_id {}", e.clip_id)));
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Renders `n_clips` uniformly sampled scenes into `dir`.
pub fn build_corpus(dir: &Path, n_clips: usize, f: usize, h: usize, w: usize, seed: u64) -> Result<CorpusManifest> {
    if n_clips == 0 {
        return Err(Error::Config("corpus needs at least one clip".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n_clips);
    for (_, clip) in generate_clips(n_clips, f, h, w, seed)? {
        entries.push(write_clip(dir, &format!("clips/{}.bin", clip.clip_id), &clip)?);
    }
    let manifest = CorpusManifest { version: 1, seed, entries };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Corpus> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest = serde_json::from_slice(&text)?;
        Ok(Corpus { dir: dir.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Loads one clip, verifying its checksum.
    pub fn load(&self, index: usize) -> Result<VideoClip> {
        let e = &self.manifest.entries[index];
        let path = self.dir.join(&e.path);
        let mut bytes = Vec::new();
        fs::File::open(&path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|err| Error::io(&path, err))?;
        if sha256_hex(&bytes) != e.checksum {
            return Err(Error::corrupt(&path, "checksum mismatch"));
        }
        let (frames, flow_gt) = decode_clip(&bytes, &path)?;
        if frames.dim() != (e.frames, e.channels, e.height, e.width) {
            return Err(Error::corrupt(&path, "dimensions disagree with manifest"));
        }
        Ok(VideoClip { frames, caption: e.caption.clone(), flow_gt, clip_id: e.clip_id.clone(), seed: e.seed })
    }

    pub fn load_all(&self) -> Result<Vec<VideoClip>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            shape: ShapeKind::Circle,
            color: Color::Red,
            size: Size::Big,
            motion: Motion::Moves,
            direction: Direction::Left,
            speed: Speed::Slowly,
            background: Background::Plain,
        }
    }

    #[test]
    fn caption_template() {
        assert_eq!(spec().caption(), "a big red circle moves slowly toward the left on the plain background");
        assert_eq!(SceneSpec::from_caption(&spec().caption()), Some(spec()));
    }

    #[test]
    fn centroid_moves_one_pixel_right() {
        let sp = SceneSpec { direction: Direction::Right, ..spec() };
        let clip = render_clip(&sp, 8, 32, 32, 3).unwrap();
        // Compare shape pixel sets: frame t+1 is frame t shifted right by 1.
        for t in 0..7 {
            for y in 0..32 {
                for x in 0..32 {
                    let a = clip.frames[[t, 0, y, x]];
                    let b = clip.frames[[t + 1, 0, y, (x + 1) % 32]];
                    assert_eq!(a == 0.9, b == 0.9);
                }
            }
        }
    }

    #[test]
    fn upward_quick_flow() {
        let sp = SceneSpec { direction: Direction::Up, speed: Speed::Quickly, ..spec() };
        let clip = render_clip(&sp, 4, 32, 32, 9).unwrap();
        let flow = clip.flow_gt.unwrap();
        for t in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let on = clip.frames[[t, 0, y, x]] == 0.9;
                    let (u, v) = (flow[[t, 0, y, x]], flow[[t, 1, y, x]]);
                    if on {
                        assert_eq!((u, v), (0.0, -3.0));
                    } else {
                        assert_eq!((u, v), (0.0, 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_clip(&spec(), 6, 16, 16, 42).unwrap();
        let b = render_clip(&spec(), 6, 16, 16, 42).unwrap();
        assert_eq!(encode_clip(&a), encode_clip(&b));
    }

    #[test]
    fn oversized_shape_rejected() {
        assert!(render_clip(&spec(), 1, 16, 16, 0).is_err());
        assert!(render_clip(&spec(), 4, 4, 16, 0).is_err());
    }

    #[test]
    fn clip_bytes_round_trip() {
        let clip = render_clip(&spec(), 3, 8, 8, 1).unwrap();
        let bytes = encode_clip(&clip);
        let (frames, flow) = decode_clip(&bytes, Path::new("x")).unwrap();
        assert_eq!(frames, clip.frames);
        assert_eq!(flow, clip.flow_gt);
        assert!(decode_clip(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
    }
}
