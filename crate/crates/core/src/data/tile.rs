use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::ValidatedDataset;
use crate::error::{Error, Result};

pub const TILE_MAGIC: &[u8; 8] = b"ANYSATTL";
pub const TILE_VERSION: u32 = 1;

/// One modality's observation of a tile, laid out `(H, W, T, C)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityData {
    pub shape: [usize; 4],
    pub values: Vec<f32>,
    /// Day of year of each observation, strictly increasing.
    pub dates: Option<Vec<u16>>,
}

impl ModalityData {
    pub fn new(shape: [usize; 4], values: Vec<f32>, dates: Option<Vec<u16>>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() || shape.contains(&0) {
            return Err(Error::shape("modality_data", &[&shape, &[values.len()]]));
        }
        if let Some(d) = &dates {
            if d.len() != shape[2] || d.windows(2).any(|w| w[0] >= w[1]) || d.iter().any(|&x| x == 0 || x > 366) {
                return Err(Error::Config(format!("dates must be {} strictly increasing days in 1..=366, got {d:?}", shape[2])));
            }
        }
        Ok(ModalityData { shape, values, dates })
    }

    pub fn side(&self) -> usize {
        self.shape[0]
    }

    pub fn timesteps(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    /// Values of pixel `(x, y)` as `T·C` row-major.
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let tc = self.shape[2] * self.shape[3];
        let o = (y * self.shape[1] + x) * tc;
        &self.values[o..o + tc]
    }

    /// Restriction to the timestamps in `keep` (sorted indices).
    pub fn select_times(&self, keep: &[usize]) -> ModalityData {
        let [h, w, t, c] = self.shape;
        let mut values = Vec::with_capacity(h * w * keep.len() * c);
        for px in 0..h * w {
            for &k in keep {
                let o = (px * t + k) * c;
                values.extend_from_slice(&self.values[o..o + c]);
            }
        }
        let dates = self.dates.as_ref().map(|d| keep.iter().map(|&k| d[k]).collect());
        ModalityData { shape: [h, w, keep.len(), c], values, dates }
    }

    /// Day-of-year per timestep; single undated images use mid-year.
    pub fn days(&self) -> Vec<f64> {
        match &self.dates {
            Some(d) => d.iter().map(|&x| x as f64).collect(),
            None => (0..self.shape[2]).map(|i| 183.0 + i as f64).collect(),
        }
    }
}

/// Class grid at a stated resolution, row-major from the top-left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelLabels {
    /// Meters per label pixel.
    pub resolution: f64,
    pub side: usize,
    pub classes: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    /// Sorted set of classes present in the tile.
    pub tile_classes: Vec<u16>,
    /// Most frequent class (lowest on ties).
    pub dominant: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<PixelLabels>,
}

/// One multimodal observation.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    pub dataset: String,
    pub tile_id: u64,
    pub modalities: BTreeMap<String, ModalityData>,
    pub labels: Option<Labels>,
}

impl TileSample {
    pub fn modality(&self, name: &str) -> Result<&ModalityData> {
        self.modalities.get(name).ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    /// Checks array shapes and temporal lengths against the dataset.
    pub fn check(&self, ds: &ValidatedDataset) -> Result<()> {
        let bad = |reason: String| Error::Dataset { dataset: ds.spec.name.clone(), reason };
        if self.modalities.len() != ds.modalities.len() {
            return Err(bad(format!("tile {} has {} modalities, expected {}", self.tile_id, self.modalities.len(), ds.modalities.len())));
        }
        for m in &ds.modalities {
            let data = self.modality(&m.name)?;
            let side = ds.tile_pixels(&m.name)?;
            let c = ds.stored_channels(&m.name)?.len();
            let t = data.shape[2];
            if data.shape[0] != side || data.shape[1] != side || data.shape[3] != c || t < m.t_range.0 || t > m.t_range.1 {
                return Err(bad(format!(
                    "tile {} modality `{}` has shape {:?}, expected ({side}, {side}, {:?}, {c})",
                    self.tile_id, m.name, data.shape, m.t_range
                )));
            }
            if m.has_dates != data.dates.is_some() {
                return Err(bad(format!("tile {} modality `{}` date presence mismatch", self.tile_id, m.name)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dates: Option<Vec<u16>>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct TileHeader {
    dataset: String,
    tile_id: u64,
    arrays: Vec<ArrayHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Labels>,
}

/// Serialises a tile: magic, version, header length, JSON header, then the
/// little-endian f32 arrays in header order.
pub fn encode_tile(tile: &TileSample) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut offset = 0u64;
    for (name, m) in &tile.modalities {
        let len = m.values.len() as u64 * 4;
        arrays.push(ArrayHeader { name: name.clone(), shape: m.shape, dates: m.dates.clone(), offset, len });
        offset += len;
    }
    let header = TileHeader { dataset: tile.dataset.clone(), tile_id: tile.tile_id, arrays, labels: tile.labels.clone() };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
    out.extend_from_slice(TILE_MAGIC);
    out.extend_from_slice(&TILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in tile.modalities.values() {
        for v in &m.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tile(bytes: &[u8], path: &Path) -> Result<TileSample> {
    let corrupt = |reason: &str| Error::CorruptHeader { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 8 {
        return Err(corrupt("file shorter than the magic"));
    }
    if &bytes[..8] != TILE_MAGIC {
        return Err(Error::Format { path: path.to_path_buf(), reason: "not a tile file (bad magic)".into() });
    }
    if bytes.len() < 20 {
        return Err(corrupt("truncated before header length"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != TILE_VERSION {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("unsupported version {version}") });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
    let header: TileHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    let payload = &bytes[20 + hlen..];
    let mut modalities = BTreeMap::new();
    for a in header.arrays {
        let n: usize = a.shape.iter().product();
        if a.len != n as u64 * 4 {
            return Err(corrupt(&format!("array `{}` length disagrees with its shape", a.name)));
        }
        let raw = payload
            .get(a.offset as usize..(a.offset + a.len) as usize)
            .ok_or_else(|| corrupt(&format!("array `{}` extends past end of file", a.name)))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let data = ModalityData::new(a.shape, values, a.dates).map_err(|e| corrupt(&e.to_string()))?;
        modalities.insert(a.name, data);
    }
    Ok(TileSample { dataset: header.dataset, tile_id: header.tile_id, modalities, labels: header.labels })
}

pub fn store_tile(path: &Path, tile: &TileSample) -> Result<()> {
    let bytes = encode_tile(tile)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_tile(path: &Path) -> Result<TileSample> {
    let bytes = fs::read(path)?;
    decode_tile(&bytes, path)
}

/// Loads a tile and checks it against the dataset it belongs to.
pub fn load_tile_checked(path: &Path, ds: &ValidatedDataset) -> Result<TileSample> {
    let tile = load_tile(path)?;
    tile.check(ds)?;
    Ok(tile)
}
