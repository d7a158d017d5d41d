//! On-disk formats: PFM/PPM images, event CSV files, the dataset manifest,
//! field and training checkpoints and the training log.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blur_event::EventRecord;
use crate::datagen::{Dataset, DatasetConfig, DatasetView, NovelView, ProceduralScene, ShakeTrajectory};
use crate::error::{Error, Result};
use crate::field::{EncodingConfig, FieldConfig, FieldParams};
use crate::image::Image;
use crate::lie::{PoseSE3, Trajectory};
use crate::optim::Adam;
use crate::render::Intrinsics;
use crate::train::{StepReport, TrainConfig, TrainState, ViewPoses};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Little-endian float PFM, rows stored bottom to top as the format requires.
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in img.get(x, y) {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    write_all(path, &out)
}

/// Splits off `count` whitespace-separated header tokens.
fn header_tokens<'a>(path: &Path, bytes: &'a [u8], count: usize) -> Result<(Vec<String>, &'a [u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    Ok((tokens, bytes.get(i + 1..).unwrap_or(&[])))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = read_all(path)?;
    let (tok, body) = header_tokens(path, &bytes, 4)?;
    if tok[0] != "PF" {
        return Err(Error::format(path, format!("expected color PFM, found {:?}", tok[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad dimension {s:?}")));
    let (w, h) = (parse(&tok[1])?, parse(&tok[2])?);
    let scale: f64 = tok[3].parse().map_err(|_| Error::format(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::format(path, "big-endian PFM is not supported"));
    }
    if body.len() != w * h * 12 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", w * h * 12, body.len())));
    }
    let mut img = Image::zeros(w, h);
    let mut vals = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    for y in (0..h).rev() {
        for x in 0..w {
            let c = [vals.next().unwrap(), vals.next().unwrap(), vals.next().unwrap()];
            img.set(x, y, c);
        }
    }
    Ok(img)
}

/// 8-bit binary PPM for viewing; values are clamped to `[0, 1]`.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_all(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = read_all(path)?;
    let (tok, body) = header_tokens(path, &bytes, 4)?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(Error::format(path, "expected an 8-bit P6 PPM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad dimension {s:?}")));
    let (w, h) = (parse(&tok[1])?, parse(&tok[2])?);
    if body.len() != w * h * 3 {
        return Err(Error::format(path, "payload size does not match header"));
    }
    Image::new(w, h, body.iter().map(|&b| f64::from(b) / 255.0).collect())
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    t: f64,
    x: usize,
    y: usize,
    p: i8,
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for e in events {
        w.serialize(EventRow { t: e.t, x: e.x, y: e.y, p: e.polarity })
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let headers = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if headers != vec!["t", "x", "y", "p"] {
        return Err(Error::format(path, format!("expected header t,x,y,p, found {headers:?}")));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            let row: EventRow = row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
            if row.p != 1 && row.p != -1 {
                return Err(Error::format(path, format!("row {}: polarity {} is not ±1", i + 1, row.p)));
            }
            Ok(EventRecord { t: row.t, x: row.x, y: row.y, polarity: row.p })
        })
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub blurry_pfm: String,
    pub blurry_ppm: String,
    pub sharp_pfm: String,
    pub sharp_ppm: String,
    pub events_csv: String,
    pub event_count: usize,
    pub exposure: (f64, f64),
    pub init_pose: [f64; 12],
    pub gt_mid_pose: [f64; 12],
    /// Ground truth at evenly spaced probe times over the exposure.
    pub gt_timestamps: Vec<f64>,
    pub gt_poses: Vec<[f64; 12]>,
    pub shake: ShakeTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestNovel {
    pub pose: [f64; 12],
    pub image_pfm: String,
    pub image_ppm: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub intrinsics: Intrinsics,
    pub generator: DatasetConfig,
    pub scene: ProceduralScene,
    pub views: Vec<ManifestView>,
    pub novel_views: Vec<ManifestNovel>,
}

/// Probe count for the ground-truth pose rows written to the manifest.
pub const GT_PROBES: usize = 5;

/// Writes images, event files and the manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::with_capacity(ds.views.len());
    for (i, v) in ds.views.iter().enumerate() {
        let name = |what: &str, ext: &str| format!("view{i:02}_{what}.{ext}");
        let mv = ManifestView {
            blurry_pfm: name("blurry", "pfm"),
            blurry_ppm: name("blurry", "ppm"),
            sharp_pfm: name("sharp", "pfm"),
            sharp_ppm: name("sharp", "ppm"),
            events_csv: name("events", "csv"),
            event_count: v.events.len(),
            exposure: v.exposure,
            init_pose: v.init_pose.to_row_major(),
            gt_mid_pose: v.shake.mid_pose().to_row_major(),
            gt_timestamps: v.shake.sample(GT_PROBES).timestamps,
            gt_poses: v.shake.sample(GT_PROBES).poses.iter().map(PoseSE3::to_row_major).collect(),
            shake: v.shake.clone(),
        };
        write_pfm(&dir.join(&mv.blurry_pfm), &v.blurry)?;
        write_ppm(&dir.join(&mv.blurry_ppm), &v.blurry)?;
        write_pfm(&dir.join(&mv.sharp_pfm), &v.sharp_mid)?;
        write_ppm(&dir.join(&mv.sharp_ppm), &v.sharp_mid)?;
        write_events(&dir.join(&mv.events_csv), &v.events)?;
        views.push(mv);
    }
    let mut novel_views = Vec::with_capacity(ds.novel.len());
    for (j, n) in ds.novel.iter().enumerate() {
        let mn = ManifestNovel {
            pose: n.pose.to_row_major(),
            image_pfm: format!("novel{j:02}.pfm"),
            image_ppm: format!("novel{j:02}.ppm"),
        };
        write_pfm(&dir.join(&mn.image_pfm), &n.image)?;
        write_ppm(&dir.join(&mn.image_ppm), &n.image)?;
        novel_views.push(mn);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        intrinsics: ds.intrinsics,
        generator: ds.config.clone(),
        scene: ds.scene.clone(),
        views,
        novel_views,
    };
    let path = dir.join(MANIFEST_NAME);
    write_manifest(&path, &manifest)?;
    Ok(path)
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    write_all(path, serde_json::to_string_pretty(m)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
    }
    m.intrinsics.validate()?;
    Ok(m)
}

/// Accepts a dataset directory or the manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn pose(path: &Path, row: &[f64; 12]) -> Result<PoseSE3> {
    let p = PoseSE3::from_row_major(row)?;
    if !p.is_valid(1e-6) {
        return Err(Error::format(path, "pose rotation is not orthonormal"));
    }
    Ok(p)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let m = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let k = m.intrinsics;
    let check = |img: Image, file: &str| -> Result<Image> {
        if (img.width, img.height) != (k.width, k.height) {
            return Err(Error::format(dir.join(file), "image size does not match intrinsics"));
        }
        Ok(img)
    };
    let mut views = Vec::with_capacity(m.views.len());
    for v in &m.views {
        let events = read_events(&dir.join(&v.events_csv))?;
        if let Some(e) = events.iter().find(|e| e.x >= k.width || e.y >= k.height) {
            return Err(Error::format(dir.join(&v.events_csv), format!("event pixel ({}, {}) out of bounds", e.x, e.y)));
        }
        views.push(DatasetView {
            blurry: check(read_pfm(&dir.join(&v.blurry_pfm))?, &v.blurry_pfm)?,
            events,
            exposure: v.exposure,
            shake: v.shake.clone(),
            init_pose: pose(&mpath, &v.init_pose)?,
            sharp_mid: check(read_pfm(&dir.join(&v.sharp_pfm))?, &v.sharp_pfm)?,
        });
    }
    let novel = m
        .novel_views
        .iter()
        .map(|n| {
            Ok(NovelView { pose: pose(&mpath, &n.pose)?, image: check(read_pfm(&dir.join(&n.image_pfm))?, &n.image_pfm)? })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { config: m.generator, intrinsics: k, scene: m.scene, views, novel })
}

const FIELD_MAGIC: &[u8; 8] = b"EVBFIELD";
const FIELD_VERSION: u32 = 1;

/// Little-endian cursor over a byte slice.
struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn field_to_bytes(f: &FieldParams) -> Vec<u8> {
    let c = &f.config;
    let mut out = FIELD_MAGIC.to_vec();
    for v in [FIELD_VERSION, c.encoding.k_pos as u32, c.encoding.k_dir as u32, c.hidden_width as u32, c.hidden_layers as u32, c.color_width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.pos_scale.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(f.layers.len() as u32).to_le_bytes());
    for &(i, o) in &f.layers {
        out.extend_from_slice(&(i as u32).to_le_bytes());
        out.extend_from_slice(&(o as u32).to_le_bytes());
    }
    out.extend_from_slice(&(f.data.len() as u64).to_le_bytes());
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn field_from_bytes(path: &Path, bytes: &[u8]) -> Result<FieldParams> {
    let mut c = Cursor { path, bytes, pos: 0 };
    if c.take(8)? != FIELD_MAGIC {
        return Err(Error::format(path, "not a field checkpoint"));
    }
    let version = c.u32()?;
    if version != FIELD_VERSION {
        return Err(Error::format(path, format!("unsupported field checkpoint version {version}")));
    }
    let encoding = EncodingConfig { k_pos: c.u32()? as usize, k_dir: c.u32()? as usize };
    let (hidden_width, hidden_layers, color_width) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let config = FieldConfig { encoding, hidden_width, hidden_layers, color_width, pos_scale: c.f64()?, seed: c.u64()? };
    let n_layers = c.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push((c.u32()? as usize, c.u32()? as usize));
    }
    if layers != config.layer_shapes() {
        return Err(Error::format(path, "layer shapes disagree with the stored configuration"));
    }
    let n = c.u64()? as usize;
    let data = c.f64s(n)?;
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    FieldParams::from_parts(config, data)
}

pub fn write_field(path: &Path, f: &FieldParams) -> Result<()> {
    write_all(path, &field_to_bytes(f))
}

pub fn read_field(path: &Path) -> Result<FieldParams> {
    field_from_bytes(path, &read_all(path)?)
}

/// Hex SHA-256 of the configuration's JSON form.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointView {
    pub timestamps: Vec<f64>,
    /// The learned poses at `timestamps`.
    pub poses: Vec<[f64; 12]>,
    pub bases: Vec<[f64; 12]>,
    pub tangents: Vec<[f64; 6]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub iteration: usize,
    pub adam_steps: u64,
    pub views: Vec<CheckpointView>,
}

pub const CHECKPOINT_NAME: &str = "checkpoint.json";
const CHECKPOINT_VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    pub trajectories: Vec<Trajectory>,
}

/// Writes `checkpoint.json`, `field.bin`, optional `coarse.bin` and `adam.bin` into `dir`.
pub fn write_checkpoint(dir: &Path, config: &TrainConfig, state: &TrainState, trajectories: &[Trajectory]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let views = state
        .poses
        .iter()
        .zip(trajectories)
        .map(|(vp, t)| CheckpointView {
            timestamps: t.timestamps.clone(),
            poses: t.poses.iter().map(PoseSE3::to_row_major).collect(),
            bases: vp.bases.iter().map(PoseSE3::to_row_major).collect(),
            tangents: vp.tangents.clone(),
        })
        .collect();
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        config_hash: config_hash(config),
        iteration: state.iteration,
        adam_steps: state.adam.steps,
        views,
    };
    write_all(&dir.join(CHECKPOINT_NAME), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    write_field(&dir.join("field.bin"), &state.field)?;
    if let Some(c) = &state.coarse {
        write_field(&dir.join("coarse.bin"), c)?;
    }
    let mut adam = (state.adam.m.len() as u64).to_le_bytes().to_vec();
    for v in state.adam.m.iter().chain(&state.adam.v) {
        adam.extend_from_slice(&v.to_le_bytes());
    }
    write_all(&dir.join("adam.bin"), &adam)
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(CHECKPOINT_NAME);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported checkpoint version {}", meta.version)));
    }
    if meta.config_hash != config_hash(&meta.config) {
        return Err(Error::format(&mpath, "configuration hash mismatch"));
    }
    let field = read_field(&dir.join("field.bin"))?;
    let coarse = if meta.config.hierarchical { Some(read_field(&dir.join("coarse.bin"))?) } else { None };
    let apath = dir.join("adam.bin");
    let bytes = read_all(&apath)?;
    let mut c = Cursor { path: &apath, bytes: &bytes, pos: 0 };
    let n = c.u64()? as usize;
    let mut adam = Adam::new(n);
    adam.m = c.f64s(n)?;
    adam.v = c.f64s(n)?;
    adam.steps = meta.adam_steps;
    let mut poses = Vec::with_capacity(meta.views.len());
    let mut trajectories = Vec::with_capacity(meta.views.len());
    for v in &meta.views {
        poses.push(ViewPoses {
            bases: v.bases.iter().map(|r| pose(&mpath, r)).collect::<Result<_>>()?,
            tangents: v.tangents.clone(),
        });
        let ps = v.poses.iter().map(|r| pose(&mpath, r)).collect::<Result<_>>()?;
        trajectories.push(Trajectory::new(v.timestamps.clone(), ps)?);
    }
    let state = TrainState { field, coarse, poses, adam, iteration: meta.iteration };
    Ok(Checkpoint { config: meta.config, state, trajectories })
}

/// Per-iteration CSV log with header `iter,L_total,L_blur,L_event,pose_drift`.
pub struct TrainLog {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(create(path)?);
        writer
            .write_record(["iter", "L_total", "L_blur", "L_event", "pose_drift"])
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { path: path.to_path_buf(), writer })
    }

    pub fn append(&mut self, r: &StepReport) -> Result<()> {
        let row = [
            r.iteration.to_string(),
            r.loss.total.to_string(),
            r.loss.blur().to_string(),
            r.loss.event.to_string(),
            r.pose_drift.to_string(),
        ];
        self.writer.write_record(&row).map_err(|e| Error::format(&self.path, e.to_string()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a pose list file: one pose per line as 12 whitespace- or
/// comma-separated numbers; `#` starts a comment.
pub fn read_pose_list(path: &Path) -> Result<Vec<PoseSE3>> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let nums: Vec<f64> = l
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| Error::format(path, format!("line {}: bad number {s:?}", i + 1))))
                .collect::<Result<_>>()?;
            PoseSE3::from_row_major(&nums)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
                .and_then(|p| {
                    if p.is_valid(1e-6) {
                        Ok(p)
                    } else {
                        Err(Error::format(path, format!("line {}: rotation is not orthonormal", i + 1)))
                    }
                })
        })
        .collect()
}

pub fn write_pose_list(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    let mut s = String::from("# r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz\n");
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(f64::to_string).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    write_all(path, s.as_bytes())
}
