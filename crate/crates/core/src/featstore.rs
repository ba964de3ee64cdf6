//! Feature storage: typed collections of global feature vectors and local
//! feature maps, aggregation (generalized-mean pooling), normalization, and
//! the binary file formats consumed by the rest of the pipeline.
//!
//! Vectors are stored as little-endian `f32`; all arithmetic accumulates in
//! `f64`. Record order in a file is authoritative: matrix row `i` always
//! corresponds to record `i` downstream.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::math;

pub const CVFT_MAGIC: [u8; 4] = *b"CVFT";
pub const CVFM_MAGIC: [u8; 4] = *b"CVFM";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_NORMALIZED: u32 = 1;
/// Floor applied to map activations before fractional exponentiation.
pub const GEM_EPS: f64 = 1e-6;
/// Unit-norm tolerance for sets flagged `normalized`.
pub const NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTag {
    Query,
    Reference,
}

impl ViewTag {
    fn to_u32(self) -> u32 {
        match self {
            ViewTag::Query => 0,
            ViewTag::Reference => 1,
        }
    }

    fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(ViewTag::Query),
            1 => Ok(ViewTag::Reference),
            _ => Err(Error::CorruptFeatureFile),
        }
    }
}

/// A named, ordered collection of fixed-dimension feature vectors for one
/// view. Invariants: every vector has exactly `dim` finite components, ids
/// are unique, and a set flagged normalized has unit rows within 1e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    view_tag: ViewTag,
    dim: usize,
    normalized: bool,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl FeatureSet {
    pub fn from_records<I, V>(
        view_tag: ViewTag,
        dim: usize,
        normalized: bool,
        records: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (String, V)>,
        V: AsRef<[f32]>,
    {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for (id, vec) in records {
            let vec = vec.as_ref();
            if vec.len() != dim {
                return Err(Error::invalid(format!(
                    "record `{id}` has {} components, expected {dim}",
                    vec.len()
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteFeature);
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateRecordId(id));
            }
            if normalized {
                let norm = math::l2_norm(&vec.iter().map(|&v| v as f64).collect::<Vec<_>>());
                if (norm - 1.0).abs() > NORM_TOL {
                    return Err(Error::invalid(format!(
                        "record `{id}` flagged normalized but has norm {norm}"
                    )));
                }
            }
            ids.push(id);
            data.extend_from_slice(vec);
        }
        Ok(Self {
            view_tag,
            dim,
            normalized,
            ids,
            data,
        })
    }

    pub fn view_tag(&self) -> ViewTag {
        self.view_tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.vector(i)))
    }

    /// Widen to the `f64` matrix used by training and retrieval arithmetic.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), self.dim));
        let data = &self.data;
        let dim = self.dim;
        math::for_each_row(&mut out, |i, row| {
            for (o, &v) in row.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                *o = v as f64;
            }
        });
        out
    }

    /// New set containing the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        FeatureSet::from_records(
            self.view_tag,
            self.dim,
            self.normalized,
            indices
                .iter()
                .map(|&i| (self.ids[i].clone(), self.vector(i).to_vec())),
        )
    }

    /// Check all invariants (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.len() * self.dim {
            return Err(Error::CorruptFeatureFile);
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature);
        }
        let mut seen = HashSet::new();
        for id in &self.ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateRecordId(id.clone()));
            }
        }
        if self.normalized {
            for i in 0..self.len() {
                let v: Vec<f64> = self.vector(i).iter().map(|&x| x as f64).collect();
                if (math::l2_norm(&v) - 1.0).abs() > NORM_TOL {
                    return Err(Error::invalid(format!(
                        "record `{}` flagged normalized but is not unit norm",
                        self.ids[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An H x W grid of `dim`-channel activations, the input to [`gem_pool`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LocalFeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyFeatureMap);
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if data.len() != height * width * dim {
            return Err(Error::invalid(format!(
                "feature map data has {} values, expected {}",
                data.len(),
                height * width * dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature);
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Channel values of cell `i` in row-major cell order.
    pub fn cell(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// A GPS tag attached to a reference record.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTag {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

impl GeoTag {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(format!("latitude {lat} out of range")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!("longitude {lon} out of range")));
        }
        Ok(Self {
            id: id.into(),
            lat,
            lon,
        })
    }
}

/// Generalized-mean pooling over a local feature map: per channel c,
/// `x_c = (sum_i clamp(v_ic, eps)^p)^(1/p)`. `p = 3` is the usual setting;
/// `p = 1` reduces to a channelwise sum.
pub fn gem_pool(map: &LocalFeatureMap, p: f64) -> Result<Vec<f64>> {
    if map.cells() == 0 {
        return Err(Error::EmptyFeatureMap);
    }
    if !p.is_finite() || p < 1.0 {
        return Err(Error::invalid(format!("gem exponent must be >= 1, got {p}")));
    }
    let dim = map.dim();
    let cells = map.cells();
    let data = &map.data;
    // channels are independent; accumulate each in f64 over cells in order
    let pooled = math::map_indexed(dim, |c| {
        let mut acc = 0.0f64;
        for i in 0..cells {
            let v = (data[i * dim + c] as f64).max(GEM_EPS);
            acc += v.powf(p);
        }
        acc.powf(1.0 / p)
    });
    if !math::all_finite(&pooled) {
        return Err(Error::NonFiniteFeature);
    }
    Ok(pooled)
}

/// Scale `x` to unit L2 norm. Near-zero vectors are rejected.
pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let norm = math::l2_norm(x);
    if !norm.is_finite() || norm <= 1e-12 {
        return Err(Error::DegenerateVector);
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

// ---------------------------------------------------------------------------
// CVFT v1: feature-set file
// ---------------------------------------------------------------------------

pub fn write_feature_set<W: Write>(set: &FeatureSet, w: &mut W) -> Result<()> {
    set.validate()?;
    w.write_all(&CVFT_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(set.view_tag.to_u32())?;
    w.write_u64::<LittleEndian>(set.len() as u64)?;
    w.write_u32::<LittleEndian>(set.dim as u32)?;
    let flags = if set.normalized { FLAG_NORMALIZED } else { 0 };
    w.write_u32::<LittleEndian>(flags)?;
    for &v in &set.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    for id in &set.ids {
        let bytes = id.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("record id too long: {id}")));
        }
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
    }
    Ok(())
}

pub fn read_feature_set<R: Read>(r: &mut R) -> Result<FeatureSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != CVFT_MAGIC {
        return Err(Error::UnrecognizedFormat);
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnrecognizedFormat);
    }
    let view_tag = ViewTag::from_u32(r.read_u32::<LittleEndian>().map_err(truncated)?)?;
    let count = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let flags = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if dim == 0 {
        return Err(Error::CorruptFeatureFile);
    }
    let mut data = vec![0f32; count * dim];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(truncated)?;
        let id = String::from_utf8(buf).map_err(|_| Error::CorruptFeatureFile)?;
        ids.push(id);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CorruptFeatureFile);
    }
    let set = FeatureSet {
        view_tag,
        dim,
        normalized: flags & FLAG_NORMALIZED != 0,
        ids,
        data,
    };
    set.validate()?;
    Ok(set)
}

pub fn save_feature_set(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_feature_set(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_feature_set(&mut r)
}

// ---------------------------------------------------------------------------
// CVFM v1: local-feature-map file
// ---------------------------------------------------------------------------

pub fn write_feature_map<W: Write>(map: &LocalFeatureMap, w: &mut W) -> Result<()> {
    w.write_all(&CVFM_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(map.height as u32)?;
    w.write_u32::<LittleEndian>(map.width as u32)?;
    w.write_u32::<LittleEndian>(map.dim as u32)?;
    for &v in &map.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_feature_map<R: Read>(r: &mut R) -> Result<LocalFeatureMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != CVFM_MAGIC {
        return Err(Error::UnrecognizedFormat);
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnrecognizedFormat);
    }
    let h = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let w_ = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if h == 0 || w_ == 0 || dim == 0 {
        return Err(Error::CorruptFeatureFile);
    }
    let mut data = vec![0f32; h * w_ * dim];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CorruptFeatureFile);
    }
    LocalFeatureMap::new(h, w_, dim, data)
}

pub fn save_feature_map(map: &LocalFeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_feature_map(map, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<LocalFeatureMap> {
    let mut r = BufReader::new(File::open(path)?);
    read_feature_map(&mut r)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::CorruptFeatureFile
    } else {
        Error::Io(e)
    }
}

// ---------------------------------------------------------------------------
// Geo-tag sidecar: CSV with header id,lat,lon
// ---------------------------------------------------------------------------

pub fn load_geo_tags(path: impl AsRef<Path>) -> Result<Vec<GeoTag>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "lat" || &headers[2] != "lon" {
        return Err(Error::invalid("geo-tag csv must have header id,lat,lon"));
    }
    let mut tags = Vec::new();
    for record in reader.records() {
        let record = record?;
        let lat: f64 = record[1]
            .parse()
            .map_err(|_| Error::invalid(format!("bad latitude `{}`", &record[1])))?;
        let lon: f64 = record[2]
            .parse()
            .map_err(|_| Error::invalid(format!("bad longitude `{}`", &record[2])))?;
        tags.push(GeoTag::new(record[0].to_string(), lat, lon)?);
    }
    Ok(tags)
}

pub fn save_geo_tags(tags: &[GeoTag], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["id", "lat", "lon"])?;
    for tag in tags {
        writer.write_record([tag.id.as_str(), &tag.lat.to_string(), &tag.lon.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}
