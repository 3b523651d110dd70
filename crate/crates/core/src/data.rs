//! Frame-sequence sources.
//!
//! * IDX digit files (the MNIST container) → [`DigitSprite`]s.
//! * Bouncing-sprite videos: sprites move at constant velocity and reflect
//!   off the canvas walls; overlaps combine by per-pixel maximum.
//! * A procedural fallback drawing squares, discs and crosses, so nothing
//!   here needs downloaded data.
//! * [`SequenceStore`]: uniform-shape sequences with an 8-bit on-disk form.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DIGIT_SIZE: usize = 28;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const STORE_MAGIC: &[u8; 4] = b"MDSQ";
pub const STORE_VERSION: u32 = 1;
const STORE_HEADER_LEN: usize = 4 + 4 + 6 * 4;

/// Seed of the pinned evaluation store; training stores use other seeds.
pub const PINNED_TEST_SEED: u64 = 0x7e57_5eed;

/// Worker threads for embarrassingly parallel work, capped by
/// `MODELAB_THREADS` when set.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("MODELAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DigitSprite {
    /// Row-major 28×28 intensities in [0, 1].
    pub bitmap: Vec<f64>,
    pub label: u8,
}

/// Square grayscale stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl From<&DigitSprite> for Sprite {
    fn from(d: &DigitSprite) -> Self {
        Sprite {
            size: DIGIT_SIZE,
            pixels: d.bitmap.clone(),
        }
    }
}

// ---- IDX ---------------------------------------------------------------

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format("IDX header truncated"))
}

/// Parses an IDX image file (`0x00000803`) of 28×28 images.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != DIGIT_SIZE || cols != DIGIT_SIZE {
        return Err(Error::format(format!("IDX images are {rows}x{cols}, expected 28x28")));
    }
    let px = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * px {
        return Err(Error::format(format!(
            "IDX image payload is {} bytes, header implies {}",
            body.len(),
            count * px
        )));
    }
    Ok(body
        .chunks_exact(px)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect())
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(format!(
            "IDX label payload is {} bytes, header implies {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<DigitSprite>> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(bitmap, label)| DigitSprite { bitmap, label })
        .collect())
}

/// Encodes sprites as an (images, labels) IDX pair, pixels rounded to bytes.
pub fn encode_idx(sprites: &[DigitSprite]) -> (Vec<u8>, Vec<u8>) {
    let n = sprites.len() as u32;
    let mut images = Vec::with_capacity(16 + sprites.len() * DIGIT_SIZE * DIGIT_SIZE);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(DIGIT_SIZE as u32).to_be_bytes());
    images.extend_from_slice(&(DIGIT_SIZE as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + sprites.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for s in sprites {
        images.extend(s.bitmap.iter().map(|&v| quantize(v)));
        labels.push(s.label);
    }
    (images, labels)
}

// ---- kinematics ----------------------------------------------------------

/// Constant-velocity motion inside `[0, limit]` per axis with elastic
/// reflection at both walls. Coordinates are `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub limit: [f64; 2],
}

impl Trajectory {
    pub fn step(&mut self) {
        for a in 0..2 {
            let lim = self.limit[a];
            if lim <= 0.0 {
                self.pos[a] = 0.0;
                continue;
            }
            let mut p = self.pos[a] + self.vel[a];
            loop {
                if p < 0.0 {
                    p = -p;
                    self.vel[a] = -self.vel[a];
                } else if p > lim {
                    p = 2.0 * lim - p;
                    self.vel[a] = -self.vel[a];
                } else {
                    break;
                }
            }
            self.pos[a] = p;
        }
    }

    /// Integer top-left corner used for rendering.
    pub fn pixel(&self) -> [usize; 2] {
        [self.pos[0].round() as usize, self.pos[1].round() as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub size: usize,
    pub num_digits: usize,
    pub seq_len: usize,
    pub input_len: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Edge length of procedural sprites (ignored for digits).
    pub sprite_size: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            size: 64,
            num_digits: 2,
            seq_len: 20,
            input_len: 10,
            speed_min: 2.0,
            speed_max: 4.0,
            sprite_size: 12,
        }
    }
}

impl GenParams {
    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.seq_len == 0 {
            return Err(Error::Config("canvas size and seq_len must be positive".into()));
        }
        if self.input_len == 0 || self.input_len >= self.seq_len {
            return Err(Error::Config(format!(
                "input_len {} must be in 1..seq_len ({})",
                self.input_len, self.seq_len
            )));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return Err(Error::Config("speed range must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }
}

/// One rendered sequence with its per-frame occupancy mask.
#[derive(Clone, Debug)]
pub struct Scene {
    pub frames: Vec<f64>,
    pub occupancy: Vec<bool>,
    pub trajectories: Vec<Vec<Trajectory>>,
}

/// Renders `seq_len` frames of `sprites[i]` following `starts[i]`.
pub fn render_scene(sprites: &[&Sprite], starts: &[Trajectory], size: usize, seq_len: usize) -> Result<Scene> {
    for s in sprites {
        if s.size > size {
            return Err(Error::invalid(format!("sprite of size {} exceeds canvas {size}", s.size)));
        }
    }
    let plane = size * size;
    let mut frames: Vec<f64> = vec![0.0; seq_len * plane];
    let mut occupancy = vec![false; seq_len * plane];
    let mut tracks: Vec<Trajectory> = starts.to_vec();
    let mut history = vec![Vec::with_capacity(seq_len); starts.len()];
    for t in 0..seq_len {
        let frame = &mut frames[t * plane..(t + 1) * plane];
        let occ = &mut occupancy[t * plane..(t + 1) * plane];
        for ((sprite, tr), hist) in sprites.iter().zip(&tracks).zip(history.iter_mut()) {
            hist.push(*tr);
            let [x0, y0] = tr.pixel();
            for sy in 0..sprite.size {
                for sx in 0..sprite.size {
                    let v = sprite.pixels[sy * sprite.size + sx];
                    if v <= 0.0 {
                        continue;
                    }
                    let idx = (y0 + sy) * size + x0 + sx;
                    frame[idx] = frame[idx].max(v).min(1.0);
                    occ[idx] = true;
                }
            }
        }
        for tr in tracks.iter_mut() {
            tr.step();
        }
    }
    Ok(Scene {
        frames,
        occupancy,
        trajectories: history,
    })
}

fn random_start(rng: &mut ChaCha8Rng, sprite: &Sprite, p: &GenParams) -> Trajectory {
    let lim = (p.size - sprite.size) as f64;
    let speed = if p.speed_max > p.speed_min {
        rng.gen_range(p.speed_min..p.speed_max)
    } else {
        p.speed_min
    };
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    Trajectory {
        pos: [rng.gen_range(0.0..=lim), rng.gen_range(0.0..=lim)],
        vel: [speed * theta.cos(), speed * theta.sin()],
        limit: [lim, lim],
    }
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate(sprites: &[Sprite], count: usize, seed: u64, params: &GenParams, tag: &str) -> Result<SequenceStore> {
    params.validate()?;
    if params.num_digits > 0 && sprites.is_empty() {
        return Err(Error::invalid("no sprites to place"));
    }
    if let Some(s) = sprites.iter().find(|s| s.size > params.size) {
        return Err(Error::invalid(format!("sprite of size {} exceeds canvas {}", s.size, params.size)));
    }
    let make = |i: usize| -> Result<Scene> {
        let mut rng = sequence_rng(seed, i);
        let chosen: Vec<&Sprite> = (0..params.num_digits).map(|_| &sprites[rng.gen_range(0..sprites.len())]).collect();
        let starts: Vec<Trajectory> = chosen.iter().map(|s| random_start(&mut rng, s, params)).collect();
        render_scene(&chosen, &starts, params.size, params.seq_len)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let scenes: Vec<Scene> = pool.install(|| (0..count).into_par_iter().map(make).collect::<Result<_>>())?;

    let mut store = SequenceStore::empty(params.seq_len, params.input_len, 1, params.size, params.size)?;
    let mut occupancy = Vec::with_capacity(count * store.sequence_len());
    for (i, scene) in scenes.into_iter().enumerate() {
        store.frames.extend(scene.frames);
        occupancy.extend(scene.occupancy);
        store.ids.push(format!("{tag}:{seed}:{i}"));
    }
    store.occupancy = Some(occupancy);
    Ok(store)
}

/// Bouncing-digit sequences in the usual moving-digits recipe.
pub fn generate_moving_mnist(sprites: &[DigitSprite], count: usize, seed: u64, params: &GenParams) -> Result<SequenceStore> {
    let sprites: Vec<Sprite> = sprites.iter().map(Sprite::from).collect();
    generate(&sprites, count, seed, params, "mnist")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Cross];

    pub fn sprite(self, size: usize) -> Sprite {
        let mut pixels = vec![0.0; size * size];
        let c = (size as f64 - 1.0) / 2.0;
        let r = size as f64 / 2.0;
        let bar = (size / 3).max(1);
        let lo = (size - bar) / 2;
        for y in 0..size {
            for x in 0..size {
                let on = match self {
                    ShapeKind::Square => true,
                    ShapeKind::Disc => {
                        let (dx, dy) = (x as f64 - c, y as f64 - c);
                        dx * dx + dy * dy <= r * r
                    }
                    ShapeKind::Cross => (lo..lo + bar).contains(&x) || (lo..lo + bar).contains(&y),
                };
                if on {
                    pixels[y * size + x] = 1.0;
                }
            }
        }
        Sprite { size, pixels }
    }
}

/// Procedural fallback with the same motion law as the digit generator.
pub fn generate_moving_shapes(count: usize, seed: u64, params: &GenParams) -> Result<SequenceStore> {
    if params.sprite_size == 0 {
        return Err(Error::Config("sprite_size must be positive".into()));
    }
    let sprites: Vec<Sprite> = ShapeKind::ALL.iter().map(|k| k.sprite(params.sprite_size)).collect();
    generate(&sprites, count, seed, params, "shapes")
}

// ---- sequence store ------------------------------------------------------

/// Uniform-shape frame sequences, values in [0, 1], sequence-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStore {
    pub seq_len: usize,
    pub input_len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f64>,
    pub ids: Vec<String>,
    /// Sprite coverage per pixel, known only for freshly generated stores.
    pub occupancy: Option<Vec<bool>>,
}

/// A batch of sequences `[B, T+K, C, H, W]`.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub frames: Tensor,
    pub input_len: usize,
    pub pred_len: usize,
    pub ids: Vec<String>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

impl SequenceStore {
    pub fn empty(seq_len: usize, input_len: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if seq_len == 0 || channels == 0 || height == 0 || width == 0 || input_len == 0 || input_len >= seq_len {
            return Err(Error::invalid(format!(
                "invalid store geometry seq_len={seq_len} input_len={input_len} {channels}x{height}x{width}"
            )));
        }
        Ok(Self {
            seq_len,
            input_len,
            channels,
            height,
            width,
            frames: Vec::new(),
            ids: Vec::new(),
            occupancy: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pred_len(&self) -> usize {
        self.seq_len - self.input_len
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sequence_len(&self) -> usize {
        self.seq_len * self.frame_len()
    }

    pub fn sequence(&self, i: usize) -> &[f64] {
        let n = self.sequence_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn occupancy_of(&self, i: usize) -> Option<&[bool]> {
        let n = self.sequence_len();
        self.occupancy.as_ref().map(|o| &o[i * n..(i + 1) * n])
    }

    pub fn push(&mut self, id: String, frames: &[f64]) -> Result<()> {
        if frames.len() != self.sequence_len() {
            return Err(Error::invalid(format!(
                "sequence has {} values, store expects {}",
                frames.len(),
                self.sequence_len()
            )));
        }
        if frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values must lie in [0, 1]"));
        }
        self.frames.extend_from_slice(frames);
        self.ids.push(id);
        self.occupancy = None;
        Ok(())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<SequenceBatch> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.sequence_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sequence index {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(self.sequence(i));
        }
        let shape = [indices.len(), self.seq_len, self.channels, self.height, self.width];
        Ok(SequenceBatch {
            frames: Tensor::new(data, &shape)?,
            input_len: self.input_len,
            pred_len: self.pred_len(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STORE_HEADER_LEN + self.frames.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        for v in [self.len(), self.seq_len, self.input_len, self.channels, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(self.frames.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_bytes(bytes: &[u8], tag: &str) -> Result<Self> {
        if bytes.len() < STORE_HEADER_LEN {
            return Err(Error::format("sequence store header truncated"));
        }
        if &bytes[..4] != STORE_MAGIC {
            return Err(Error::format("not a sequence store (bad magic)"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let version = field(0) as u32;
        if version != STORE_VERSION {
            return Err(Error::format(format!("sequence store version {version} unsupported")));
        }
        let (count, seq_len, input_len, channels, height, width) =
            (field(1), field(2), field(3), field(4), field(5), field(6));
        let mut store = Self::empty(seq_len, input_len, channels, height, width)
            .map_err(|e| Error::format(format!("bad store header: {e}")))?;
        let payload = &bytes[STORE_HEADER_LEN..];
        let expected = count
            .checked_mul(store.sequence_len())
            .ok_or_else(|| Error::format("store header overflows"))?;
        if payload.len() != expected {
            return Err(Error::format(format!(
                "store payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        store.frames = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
        store.ids = (0..count).map(|i| format!("{tag}:{i}")).collect();
        Ok(store)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn write_sequence_store(path: &Path, store: &SequenceStore) -> Result<()> {
    let tmp = crate::model::partial_path(path);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(&store.to_bytes())?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_sequence_store(path: &Path) -> Result<SequenceStore> {
    let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("store");
    SequenceStore::from_bytes(&fs::read(path)?, tag)
}

// ---- batching ------------------------------------------------------------

/// Shuffled order of `0..len` for `epoch`, fixed by `seed`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

pub fn batches_per_epoch(len: usize, batch_size: usize) -> usize {
    len.div_ceil(batch_size)
}

/// Indices of the batch consumed at global step `iteration`.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let per = batches_per_epoch(len, batch_size) as u64;
    if per == 0 {
        return Vec::new();
    }
    let (epoch, pos) = (iteration / per, (iteration % per) as usize);
    let order = epoch_order(len, seed, epoch);
    order[pos * batch_size..((pos + 1) * batch_size).min(len)].to_vec()
}

/// One shuffled pass over a store; the last batch may be short.
pub struct BatchIter<'a> {
    store: &'a SequenceStore,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iterator(store: &SequenceStore, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    Ok(BatchIter {
        store,
        order: epoch_order(store.len(), seed, epoch),
        batch_size,
        pos: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.store.batch(idx).expect("indices come from the store"))
    }
}
