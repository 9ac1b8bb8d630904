//! File formats. Binary files start with an 8-byte magic and a `u16` version
//! and are little-endian throughout; text files are ASCII with `\n` endings.
//! Floats in text files use the shortest representation that parses back to
//! the same value, so every format round-trips bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Point3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::aggregator::{AggregatorDims, AggregatorModel, GlobalDescriptor, VisualFeatureMap};
use crate::covis::{CovisGraph, Edge, ImageId};
use crate::geometry::{CameraIntrinsics, Keypoint, Pose, SceneCoordinate};
use crate::localize::{LocalizationResult, ProductQuantizer, RetrievalIndex};
use crate::numeric::PcaModel;
use crate::pipeline::Dataset;
use crate::scr::{OutputScaling, ScrArchitecture, ScrModel};
use crate::synthgen::{RenderedImage, SceneCamera};

pub const FORMAT_VERSION: u16 = 1;

pub const MAGIC_DSC: &[u8; 8] = b"SCRK-DSC";
pub const MAGIC_AGG: &[u8; 8] = b"SCRK-AGG";
pub const MAGIC_SCR: &[u8; 8] = b"SCRK-SCR";
pub const MAGIC_IDX: &[u8; 8] = b"SCRK-IDX";

pub const GRAPH_HEADER: &str = "# covis v1";
pub const RESULTS_HEADER: &str = "# results v1";
pub const OBSERVATIONS_HEADER: &str = "# observations v1";

/// Quaternion norms further than this from one are normalised with a warning.
pub const QUAT_WARN_TOL: f64 = 1e-3;
/// Quaternion norms further than this from one are rejected.
pub const QUAT_ERROR_TOL: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a {expected} file")]
    BadMagic { path: String, expected: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { path: String, found: u16, expected: u16 },
    #[error("{path}: file is truncated")]
    Truncated { path: String },
    #[error("{path}: {count} trailing bytes")]
    TrailingBytes { path: String, count: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: quaternion norm {norm} is not unit")]
    NonUnitQuaternion { path: String, line: usize, norm: f64 },
    #[error("no intrinsics for image {0}")]
    MissingIntrinsics(ImageId),
    #[error("{path}: duplicate id {id}")]
    DuplicateId { path: String, id: u32 },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn invalid(path: &Path, message: impl ToString) -> IoError {
    IoError::Invalid {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Checks the `# <kind> v<N>` first line of a text file. A well-formed header
/// of another version is reported as such rather than as a parse error.
fn expect_header(path: &Path, first: Option<&str>, header: &str) -> Result<(), IoError> {
    if first == Some(header) {
        return Ok(());
    }
    let stem = header.rsplit_once(" v").map_or(header, |(stem, _)| stem);
    let found = first
        .and_then(|l| l.strip_prefix(stem))
        .and_then(|r| r.strip_prefix(" v"))
        .and_then(|v| v.parse::<u16>().ok());
    match found {
        Some(found) => Err(IoError::UnsupportedVersion {
            path: path.display().to_string(),
            found,
            expected: FORMAT_VERSION,
        }),
        None => Err(parse_err(path, 1, format!("missing header {header:?}"))),
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn header(magic: &[u8; 8]) -> Self {
        let mut e = Self(magic.to_vec());
        e.u16(FORMAT_VERSION);
        e
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend(u32::try_from(v).expect("size fits in u32").to_le_bytes());
    }
    fn f32s(&mut self, v: impl IntoIterator<Item = f64>) {
        for x in v {
            self.0.extend((x as f32).to_le_bytes());
        }
    }
    fn f64s(&mut self, v: impl IntoIterator<Item = f64>) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Dec<'a> {
    fn open(buf: &'a [u8], path: &'a Path, magic: &[u8; 8]) -> Result<Self, IoError> {
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(IoError::BadMagic {
                path: path.display().to_string(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let mut d = Self { buf, pos: 8, path };
        let version = d.u16()?;
        if version != FORMAT_VERSION {
            return Err(IoError::UnsupportedVersion {
                path: path.display().to_string(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(d)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.buf.len() - self.pos < n {
            return Err(IoError::Truncated {
                path: self.path.display().to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    /// Reads `n` values; the byte count is checked before allocating.
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.truncated())?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.truncated())?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn truncated(&self) -> IoError {
        IoError::Truncated {
            path: self.path.display().to_string(),
        }
    }
    fn finish(self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return Err(IoError::TrailingBytes {
                path: self.path.display().to_string(),
                count: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- descriptors

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorKind {
    Local = 0,
    Global = 1,
    FeatureTokens = 2,
}

impl DescriptorKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Local),
            1 => Some(Self::Global),
            2 => Some(Self::FeatureTokens),
            _ => None,
        }
    }
}

/// Rows of `f32` descriptors with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorFile {
    pub kind: DescriptorKind,
    pub dim: usize,
    pub ids: Vec<u32>,
    /// Row-major, `ids.len() * dim` values.
    pub values: Vec<f32>,
}

impl DescriptorFile {
    pub fn from_rows(kind: DescriptorKind, ids: Vec<u32>, rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == dim), "ragged descriptor rows");
        assert_eq!(ids.len(), rows.len());
        Self {
            kind,
            dim,
            ids,
            values: rows.iter().flatten().map(|&v| v as f32).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.count()).map(|i| self.row(i)).collect()
    }
}

pub fn write_descriptors(path: &Path, f: &DescriptorFile) -> Result<(), IoError> {
    let mut e = Enc::header(MAGIC_DSC);
    e.u32(f.count());
    e.u32(f.dim);
    e.u8(f.kind as u8);
    for v in &f.values {
        e.0.extend(v.to_le_bytes());
    }
    for id in &f.ids {
        e.0.extend(id.to_le_bytes());
    }
    write_atomic(path, &e.0)
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorFile, IoError> {
    let buf = read_bytes(path)?;
    let mut d = Dec::open(&buf, path, MAGIC_DSC)?;
    let count = d.u32()?;
    let dim = d.u32()?;
    let kind = DescriptorKind::from_u8(d.u8()?).ok_or_else(|| invalid(path, "unknown descriptor kind"))?;
    let n = count.checked_mul(dim).ok_or_else(|| d.truncated())?;
    let bytes = d.take(n.checked_mul(4).ok_or_else(|| d.truncated())?)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut ids = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let id = d.u32()? as u32;
        if !seen.insert(id) {
            return Err(IoError::DuplicateId {
                path: path.display().to_string(),
                id,
            });
        }
        ids.push(id);
    }
    d.finish()?;
    Ok(DescriptorFile { kind, dim, ids, values })
}

// ----------------------------------------------------------------- aggregator

fn put_pca(e: &mut Enc, p: &PcaModel) {
    e.u32(p.in_dim());
    e.u32(p.out_dim());
    e.f32s(p.mean().iter().copied());
    e.f32s(p.components().transpose().iter().copied());
}

fn get_pca(d: &mut Dec<'_>) -> Result<PcaModel, IoError> {
    let in_dim = d.u32()?;
    let out_dim = d.u32()?;
    let mean = d.f32s(in_dim)?;
    let comps = d.f32s(in_dim.checked_mul(out_dim).ok_or_else(|| d.truncated())?)?;
    PcaModel::from_parts(
        DVector::from_vec(mean),
        DMatrix::from_row_slice(out_dim, in_dim, &comps),
    )
    .map_err(|e| invalid(d.path, e))
}

/// Aggregator weights followed by its PCA stage.
pub fn write_aggregator(path: &Path, model: &AggregatorModel, pca: &PcaModel) -> Result<(), IoError> {
    let dims = model.dims();
    let mut e = Enc::header(MAGIC_AGG);
    e.u32(dims.d_feat);
    e.u32(dims.d_proj);
    e.u32(dims.clusters);
    e.f32s(model.params().iter().copied());
    put_pca(&mut e, pca);
    write_atomic(path, &e.0)
}

pub fn read_aggregator(path: &Path) -> Result<(AggregatorModel, PcaModel), IoError> {
    let buf = read_bytes(path)?;
    let mut d = Dec::open(&buf, path, MAGIC_AGG)?;
    let dims = AggregatorDims {
        d_feat: d.u32()?,
        d_proj: d.u32()?,
        clusters: d.u32()?,
    };
    let params = d.f32s(dims.param_count())?;
    let model = AggregatorModel::from_params(dims, params).map_err(|e| invalid(path, e))?;
    let pca = get_pca(&mut d)?;
    d.finish()?;
    if pca.in_dim() != dims.output_dim() {
        return Err(invalid(path, "PCA input does not match aggregator output"));
    }
    Ok((model, pca))
}

// ------------------------------------------------------------------------ scr

pub fn write_scr(path: &Path, model: &ScrModel) -> Result<(), IoError> {
    let a = model.architecture();
    let s = model.scaling();
    let mut e = Enc::header(MAGIC_SCR);
    e.u32(a.global_dim);
    e.u32(a.local_dim);
    e.u32(a.width);
    e.u32(a.hidden_blocks);
    e.u8(u8::from(a.residual));
    e.f32s(s.center.iter().copied());
    e.f32s([s.scale]);
    e.f32s(model.params().iter().copied());
    match model.local_pca() {
        Some(p) => {
            e.u8(1);
            put_pca(&mut e, p);
        }
        None => e.u8(0),
    }
    write_atomic(path, &e.0)
}

pub fn read_scr(path: &Path) -> Result<ScrModel, IoError> {
    let buf = read_bytes(path)?;
    let mut d = Dec::open(&buf, path, MAGIC_SCR)?;
    let arch = ScrArchitecture {
        global_dim: d.u32()?,
        local_dim: d.u32()?,
        width: d.u32()?,
        hidden_blocks: d.u32()?,
        residual: match d.u8()? {
            0 => false,
            1 => true,
            _ => return Err(invalid(path, "bad residual flag")),
        },
    };
    let c = d.f32s(3)?;
    let scale = d.f32s(1)?[0];
    let params = d.f32s(arch.param_count())?;
    let pca = match d.u8()? {
        0 => None,
        1 => Some(get_pca(&mut d)?),
        _ => return Err(invalid(path, "bad local PCA flag")),
    };
    d.finish()?;
    let scaling = OutputScaling {
        center: Vector3::new(c[0], c[1], c[2]),
        scale,
    };
    ScrModel::from_parts(arch, scaling, params, pca).map_err(|e| invalid(path, e))
}

// ---------------------------------------------------------------------- index

/// Descriptors are stored as `f64` so the exact index reloads unchanged.
pub fn write_index(path: &Path, index: &RetrievalIndex) -> Result<(), IoError> {
    let mut e = Enc::header(MAGIC_IDX);
    e.u32(index.dim());
    e.u32(index.len());
    for entry in index.entries() {
        e.0.extend(entry.image_id.to_le_bytes());
        e.f64s(entry.values().iter().copied());
    }
    match index.pq() {
        None => e.u8(0),
        Some(pq) => {
            e.u8(1);
            e.u32(pq.m());
            e.u32(pq.codebooks[0].nrows());
            e.u32(pq.sub_dim());
            for book in &pq.codebooks {
                e.f64s(book.transpose().iter().copied());
            }
            for code in &pq.codes {
                e.0.extend(code);
            }
        }
    }
    write_atomic(path, &e.0)
}

pub fn read_index(path: &Path) -> Result<RetrievalIndex, IoError> {
    let buf = read_bytes(path)?;
    let mut d = Dec::open(&buf, path, MAGIC_IDX)?;
    let dim = d.u32()?;
    let count = d.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = d.u32()? as u32;
        let values = d.f64s(dim)?;
        entries.push(GlobalDescriptor::from_stored(id, values).map_err(|e| invalid(path, e))?);
    }
    let pq = match d.u8()? {
        0 => None,
        1 => {
            let m = d.u32()?;
            let k = d.u32()?;
            let sub = d.u32()?;
            let mut codebooks = Vec::with_capacity(m.min(4096));
            for _ in 0..m {
                let v = d.f64s(k.checked_mul(sub).ok_or_else(|| d.truncated())?)?;
                codebooks.push(DMatrix::from_row_slice(k, sub, &v));
            }
            let mut codes = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                codes.push(d.take(m)?.to_vec());
            }
            Some(ProductQuantizer { codebooks, codes })
        }
        _ => return Err(invalid(path, "bad PQ flag")),
    };
    d.finish()?;
    RetrievalIndex::from_parts(entries, pq).map_err(|e| invalid(path, e))
}

// ---------------------------------------------------------------------- graph

/// Header line, a `# nodes` line listing every node (so isolated nodes
/// survive), then one `i j psi` line per edge.
pub fn graph_to_string(graph: &CovisGraph) -> String {
    let mut s = String::new();
    s.push_str(GRAPH_HEADER);
    s.push('\n');
    s.push_str("# nodes");
    for n in graph.nodes() {
        let _ = write!(s, " {n}");
    }
    s.push('\n');
    for e in graph.edges() {
        let _ = writeln!(s, "{} {} {}", e.i, e.j, e.psi);
    }
    s
}

pub fn write_graph(path: &Path, graph: &CovisGraph) -> Result<(), IoError> {
    write_atomic(path, graph_to_string(graph).as_bytes())
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        message: message.to_string(),
    }
}

fn fields<T: std::str::FromStr>(path: &Path, line_no: usize, line: &str, n: usize) -> Result<Vec<T>, IoError> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != n {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {n} fields, found {}", parts.len()),
        ));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| parse_err(path, line_no, format!("cannot parse {p:?}")))
        })
        .collect()
}

pub fn read_graph(path: &Path) -> Result<CovisGraph, IoError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    expect_header(path, lines.next().map(|(_, l)| l), GRAPH_HEADER)?;
    let mut nodes: BTreeSet<ImageId> = BTreeSet::new();
    let mut edges = Vec::new();
    for (i, line) in lines {
        let no = i + 1;
        if let Some(rest) = line.strip_prefix("# nodes") {
            for tok in rest.split_whitespace() {
                nodes.insert(
                    tok.parse()
                        .map_err(|_| parse_err(path, no, format!("bad node id {tok:?}")))?,
                );
            }
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(parse_err(path, no, "expected `i j psi`"));
        }
        let i: ImageId = parts[0].parse().map_err(|_| parse_err(path, no, "bad node id"))?;
        let j: ImageId = parts[1].parse().map_err(|_| parse_err(path, no, "bad node id"))?;
        let psi: f64 = parts[2].parse().map_err(|_| parse_err(path, no, "bad psi"))?;
        nodes.insert(i);
        nodes.insert(j);
        edges.push(Edge { i, j, psi });
    }
    CovisGraph::new(nodes.into_iter().collect(), edges).map_err(|e| invalid(path, e))
}

// ---------------------------------------------------------------------- poses

fn pose_line(id: ImageId, p: &Pose) -> String {
    let t = p.translation();
    let q = p.quaternion();
    format!("{id} {} {} {} {} {} {} {}\n", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
}

/// `id tx ty tz qx qy qz qw`, camera-to-world, scalar-last quaternion.
pub fn write_poses(path: &Path, poses: &[(ImageId, Pose)]) -> Result<(), IoError> {
    let s: String = poses.iter().map(|(id, p)| pose_line(*id, p)).collect();
    write_atomic(path, s.as_bytes())
}

/// `id fx fy cx cy width height`.
pub fn write_intrinsics(path: &Path, ks: &[(ImageId, CameraIntrinsics)]) -> Result<(), IoError> {
    let s: String = ks
        .iter()
        .map(|(id, k)| format!("{id} {} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height))
        .collect();
    write_atomic(path, s.as_bytes())
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Parses pose lines. Quaternions are used verbatim when their norm is within
/// 1e-12 of one, normalised (with a warning beyond 1e-3) up to 1e-2, and
/// rejected beyond that.
pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<(ImageId, Pose)>, IoError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (no, line) in content_lines(text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 8 {
            return Err(parse_err(path, no, format!("expected 8 fields, found {}", parts.len())));
        }
        let id: ImageId = parts[0]
            .parse()
            .map_err(|_| parse_err(path, no, format!("bad id {:?}", parts[0])))?;
        let v: Vec<f64> = fields(path, no, &parts[1..].join(" "), 7)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, no, "non-finite value"));
        }
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        let norm = q.norm();
        let dev = (norm - 1.0).abs();
        if dev > QUAT_ERROR_TOL {
            return Err(IoError::NonUnitQuaternion {
                path: path.display().to_string(),
                line: no,
                norm,
            });
        }
        if dev > QUAT_WARN_TOL {
            log::warn!("{}:{no}: quaternion norm {norm} normalised", path.display());
        }
        let unit = if dev <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        if !seen.insert(id) {
            return Err(IoError::DuplicateId {
                path: path.display().to_string(),
                id,
            });
        }
        out.push((id, Pose::from_parts(&unit, Vector3::new(v[0], v[1], v[2]))));
    }
    Ok(out)
}

pub fn parse_intrinsics(path: &Path, text: &str) -> Result<BTreeMap<ImageId, CameraIntrinsics>, IoError> {
    let mut out = BTreeMap::new();
    for (no, line) in content_lines(text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(parse_err(path, no, format!("expected 7 fields, found {}", parts.len())));
        }
        let id: ImageId = parts[0].parse().map_err(|_| parse_err(path, no, "bad id"))?;
        let f: Vec<f64> = fields(path, no, &parts[1..5].join(" "), 4)?;
        let wh: Vec<u32> = fields(path, no, &parts[5..].join(" "), 2)?;
        let k = CameraIntrinsics::new(f[0], f[1], f[2], f[3], wh[0], wh[1]).map_err(|e| parse_err(path, no, e))?;
        if out.insert(id, k).is_some() {
            return Err(IoError::DuplicateId {
                path: path.display().to_string(),
                id,
            });
        }
    }
    Ok(out)
}

/// Loads poses and their companion intrinsics file.
pub fn read_poses(poses: &Path, intrinsics: &Path) -> Result<Vec<(ImageId, Pose, CameraIntrinsics)>, IoError> {
    let p = parse_poses(poses, &read_text(poses)?)?;
    let k = parse_intrinsics(intrinsics, &read_text(intrinsics)?)?;
    p.into_iter()
        .map(|(id, pose)| k.get(&id).map(|k| (id, pose, *k)).ok_or(IoError::MissingIntrinsics(id)))
        .collect()
}

// --------------------------------------------------------------- observations

/// Per-image keypoints with ground-truth coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageObservations {
    pub image_id: ImageId,
    pub keypoints: Vec<Keypoint>,
    pub gt: Vec<SceneCoordinate>,
}

/// Lines `image index u v x y z`, indices consecutive from zero per image.
pub fn write_observations(path: &Path, obs: &[ImageObservations]) -> Result<(), IoError> {
    let mut s = String::from(OBSERVATIONS_HEADER);
    s.push('\n');
    for o in obs {
        for (i, (kp, g)) in o.keypoints.iter().zip(&o.gt).enumerate() {
            let _ = writeln!(s, "{} {i} {} {} {} {} {}", o.image_id, kp.u, kp.v, g.x, g.y, g.z);
        }
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_observations(path: &Path) -> Result<Vec<ImageObservations>, IoError> {
    let text = read_text(path)?;
    expect_header(path, text.lines().next(), OBSERVATIONS_HEADER)?;
    let mut out: Vec<ImageObservations> = Vec::new();
    for (no, line) in content_lines(&text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(parse_err(path, no, format!("expected 7 fields, found {}", parts.len())));
        }
        let ids: Vec<u32> = fields(path, no, &parts[..2].join(" "), 2)?;
        let v: Vec<f64> = fields(path, no, &parts[2..].join(" "), 5)?;
        let (image, idx) = (ids[0], ids[1] as usize);
        if out.last().is_none_or(|o| o.image_id != image) {
            if out.iter().any(|o| o.image_id == image) {
                return Err(parse_err(path, no, format!("image {image} is not contiguous")));
            }
            out.push(ImageObservations {
                image_id: image,
                keypoints: Vec::new(),
                gt: Vec::new(),
            });
        }
        let cur = out.last_mut().expect("pushed above");
        if idx != cur.keypoints.len() {
            return Err(parse_err(
                path,
                no,
                format!("expected keypoint index {}", cur.keypoints.len()),
            ));
        }
        cur.keypoints.push(Keypoint::new(v[0], v[1]));
        cur.gt.push(Point3::new(v[2], v[3], v[4]));
    }
    Ok(out)
}

// -------------------------------------------------------------------- results

/// One localization outcome as stored in a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub image_id: ImageId,
    pub estimate: Option<ResultEstimate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultEstimate {
    pub pose: Pose,
    pub inlier_count: usize,
    pub mean_inlier_residual: f64,
    pub hypothesis: usize,
}

impl ResultRecord {
    pub fn from_result(image_id: ImageId, r: Option<&LocalizationResult>) -> Self {
        Self {
            image_id,
            estimate: r.map(|r| ResultEstimate {
                pose: r.pose,
                inlier_count: r.inlier_count,
                mean_inlier_residual: r.mean_inlier_residual,
                hypothesis: r.hypothesis,
            }),
        }
    }
}

/// `id ok tx ty tz qx qy qz qw inliers mean_residual hypothesis` or `id none`.
pub fn results_to_string(records: &[ResultRecord]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in records {
        match &r.estimate {
            None => {
                let _ = writeln!(s, "{} none", r.image_id);
            }
            Some(e) => {
                let pose = pose_line(r.image_id, &e.pose);
                let rest = pose.trim_end().split_once(' ').expect("id prefix").1.to_string();
                let _ = writeln!(
                    s,
                    "{} ok {rest} {} {} {}",
                    r.image_id, e.inlier_count, e.mean_inlier_residual, e.hypothesis
                );
            }
        }
    }
    s
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<(), IoError> {
    write_atomic(path, results_to_string(records).as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, IoError> {
    let text = read_text(path)?;
    expect_header(path, text.lines().next(), RESULTS_HEADER)?;
    let mut out = Vec::new();
    for (no, line) in content_lines(&text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let id: ImageId = parts
            .first()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| parse_err(path, no, "bad id"))?;
        match parts.get(1) {
            Some(&"none") if parts.len() == 2 => out.push(ResultRecord {
                image_id: id,
                estimate: None,
            }),
            Some(&"ok") if parts.len() == 12 => {
                let pose_text = format!("{id} {}", parts[2..9].join(" "));
                let pose = parse_poses(path, &pose_text)
                    .map_err(|e| parse_err(path, no, e))?
                    .pop()
                    .expect("one pose line")
                    .1;
                let inlier_count = parts[9].parse().map_err(|_| parse_err(path, no, "bad inlier count"))?;
                let mean_inlier_residual = parts[10].parse().map_err(|_| parse_err(path, no, "bad residual"))?;
                let hypothesis = parts[11].parse().map_err(|_| parse_err(path, no, "bad hypothesis"))?;
                out.push(ResultRecord {
                    image_id: id,
                    estimate: Some(ResultEstimate {
                        pose,
                        inlier_count,
                        mean_inlier_residual,
                        hypothesis,
                    }),
                });
            }
            _ => return Err(parse_err(path, no, "expected `id none` or `id ok` with 10 values")),
        }
    }
    Ok(out)
}


// ---------------------------------------------------------------------- scene

pub const SPLIT_HEADER: &str = "# split v1";

/// Scene directory layout.
pub mod scene_files {
    pub const POSES: &str = "poses.txt";
    pub const INTRINSICS: &str = "intrinsics.txt";
    pub const SPLIT: &str = "split.txt";
    pub const OBSERVATIONS: &str = "observations.txt";
    pub const FEATURES_DIR: &str = "features";
    pub const LOCALS_DIR: &str = "locals";
}

fn dsc_name(id: ImageId) -> String {
    format!("{id:06}.dsc")
}

/// Writes cameras, split, observations and per-image descriptor files into
/// `dir` (created if needed). Returns every file written, in a fixed order.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<std::path::PathBuf>, IoError> {
    use scene_files::*;
    for sub in [dir.to_path_buf(), dir.join(FEATURES_DIR), dir.join(LOCALS_DIR)] {
        std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    }
    let mut written = Vec::new();
    let poses: Vec<(ImageId, Pose)> = data.cameras.iter().map(|c| (c.image_id, c.pose)).collect();
    let ks: Vec<(ImageId, CameraIntrinsics)> = data.cameras.iter().map(|c| (c.image_id, c.intrinsics)).collect();
    write_poses(&dir.join(POSES), &poses)?;
    write_intrinsics(&dir.join(INTRINSICS), &ks)?;
    let mut split = String::from(SPLIT_HEADER);
    split.push('\n');
    for c in &data.cameras {
        let role = if c.is_query { "query" } else { "train" };
        let tag = if data.aliased.contains(&c.image_id) {
            " aliased"
        } else {
            ""
        };
        let _ = writeln!(split, "{} {role}{tag}", c.image_id);
    }
    write_atomic(&dir.join(SPLIT), split.as_bytes())?;
    let obs: Vec<ImageObservations> = data
        .images
        .iter()
        .map(|i| ImageObservations {
            image_id: i.image_id,
            keypoints: i.keypoints.clone(),
            gt: i.gt.clone(),
        })
        .collect();
    write_observations(&dir.join(OBSERVATIONS), &obs)?;
    written.extend([POSES, INTRINSICS, SPLIT, OBSERVATIONS].map(|f| dir.join(f)));
    for img in &data.images {
        let ids = |n: usize| (0..n as u32).collect::<Vec<_>>();
        let feats: Vec<Vec<f64>> = img
            .features
            .tokens()
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        let fp = dir.join(FEATURES_DIR).join(dsc_name(img.image_id));
        write_descriptors(
            &fp,
            &DescriptorFile::from_rows(DescriptorKind::FeatureTokens, ids(feats.len()), &feats),
        )?;
        let lp = dir.join(LOCALS_DIR).join(dsc_name(img.image_id));
        let locals = &img.local_descriptors;
        write_descriptors(
            &lp,
            &DescriptorFile::from_rows(DescriptorKind::Local, ids(locals.len()), locals),
        )?;
        written.push(fp);
        written.push(lp);
    }
    Ok(written)
}

fn expect_kind(path: &Path, f: &DescriptorFile, kind: DescriptorKind) -> Result<(), IoError> {
    if f.kind != kind {
        return Err(invalid(
            path,
            format!("expected {kind:?} descriptors, found {:?}", f.kind),
        ));
    }
    if f.ids.iter().enumerate().any(|(i, id)| *id as usize != i) {
        return Err(invalid(path, "descriptor ids must be 0..count in order"));
    }
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, IoError> {
    use scene_files::*;
    let cams = read_poses(&dir.join(POSES), &dir.join(INTRINSICS))?;
    let split_path = dir.join(SPLIT);
    let text = read_text(&split_path)?;
    expect_header(&split_path, text.lines().next(), SPLIT_HEADER)?;
    let mut roles: BTreeMap<ImageId, (bool, bool)> = BTreeMap::new();
    for (no, line) in content_lines(&text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let id: ImageId = parts
            .first()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| parse_err(&split_path, no, "bad id"))?;
        let is_query = match parts.get(1) {
            Some(&"train") => false,
            Some(&"query") => true,
            _ => return Err(parse_err(&split_path, no, "expected `train` or `query`")),
        };
        let aliased = match parts.get(2) {
            None => false,
            Some(&"aliased") if parts.len() == 3 => true,
            _ => return Err(parse_err(&split_path, no, "unexpected trailing fields")),
        };
        roles.insert(id, (is_query, aliased));
    }
    let obs_path = dir.join(OBSERVATIONS);
    let obs: BTreeMap<ImageId, ImageObservations> = read_observations(&obs_path)?
        .into_iter()
        .map(|o| (o.image_id, o))
        .collect();
    let mut cameras = Vec::with_capacity(cams.len());
    let mut images = Vec::with_capacity(cams.len());
    let mut aliased = Vec::new();
    for (id, pose, intrinsics) in cams {
        let &(is_query, is_aliased) = roles
            .get(&id)
            .ok_or_else(|| invalid(&split_path, format!("image {id} has no split entry")))?;
        if is_aliased {
            aliased.push(id);
        }
        cameras.push(SceneCamera {
            image_id: id,
            pose,
            intrinsics,
            is_query,
        });
        let o = obs
            .get(&id)
            .ok_or_else(|| invalid(&obs_path, format!("image {id} has no observations")))?;
        let fp = dir.join(FEATURES_DIR).join(dsc_name(id));
        let f = read_descriptors(&fp)?;
        expect_kind(&fp, &f, DescriptorKind::FeatureTokens)?;
        let tokens = DMatrix::from_row_iterator(f.count(), f.dim, f.values.iter().map(|&v| v as f64));
        let features = VisualFeatureMap::new(id, tokens).map_err(|e| invalid(&fp, e))?;
        let lp = dir.join(LOCALS_DIR).join(dsc_name(id));
        let l = read_descriptors(&lp)?;
        expect_kind(&lp, &l, DescriptorKind::Local)?;
        if l.count() != o.keypoints.len() {
            return Err(invalid(
                &lp,
                format!("{} descriptors for {} keypoints", l.count(), o.keypoints.len()),
            ));
        }
        images.push(RenderedImage {
            image_id: id,
            keypoints: o.keypoints.clone(),
            local_descriptors: l.rows(),
            features,
            gt: o.gt.clone(),
        });
    }
    Ok(Dataset {
        cameras,
        images,
        aliased,
    })
}
