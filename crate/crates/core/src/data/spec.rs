use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exact_ratio, patch_grid, subpatch_layout, SubPatchLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    #[default]
    Normal,
    /// Footprint larger than the tile; enters the combiner as one token.
    Context,
}

/// Static description of one sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    /// Meters per pixel.
    pub resolution: f64,
    /// Inclusive range of temporal observations per tile.
    pub t_range: (usize, usize),
    pub channels: usize,
    /// Requested sub-patch side in pixels.
    pub delta: usize,
    #[serde(default)]
    pub role: Role,
    #[serde(default)]
    pub has_dates: bool,
}

impl ModalitySpec {
    pub fn time_series(name: &str, resolution: f64, t_range: (usize, usize), channels: usize, delta: usize) -> Self {
        ModalitySpec { name: name.into(), resolution, t_range, channels, delta, role: Role::Normal, has_dates: true }
    }

    pub fn image(name: &str, resolution: f64, channels: usize, delta: usize) -> Self {
        ModalitySpec { name: name.into(), resolution, t_range: (1, 1), channels, delta, role: Role::Normal, has_dates: false }
    }

    pub fn context(name: &str, resolution: f64, t_range: (usize, usize), channels: usize) -> Self {
        ModalitySpec { name: name.into(), resolution, t_range, channels, delta: 1, role: Role::Context, has_dates: true }
    }

    pub fn is_context(&self) -> bool {
        self.role == Role::Context
    }

    /// Whether the projector needs a temporal encoder.
    pub fn is_temporal(&self) -> bool {
        self.t_range.1 > 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Config(format!("modality `{}`: {reason}", self.name));
        if self.name.is_empty() || self.name.contains('/') {
            return Err(bad("name must be non-empty and contain no `/`".into()));
        }
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(bad(format!("resolution must be positive, got {}", self.resolution)));
        }
        if self.channels == 0 {
            return Err(bad("needs at least one channel".into()));
        }
        if self.t_range.0 == 0 || self.t_range.0 > self.t_range.1 {
            return Err(bad(format!("invalid temporal range {:?}", self.t_range)));
        }
        if self.t_range.1 > 366 && self.has_dates {
            return Err(bad("more observations than days in a year".into()));
        }
        if self.delta == 0 {
            return Err(bad("sub-patch size must be positive".into()));
        }
        Ok(())
    }
}

/// Known modalities by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub modalities: BTreeMap<String, ModalitySpec>,
}

impl Registry {
    pub fn new(specs: impl IntoIterator<Item = ModalitySpec>) -> Result<Self> {
        let mut modalities = BTreeMap::new();
        for m in specs {
            m.validate()?;
            if modalities.insert(m.name.clone(), m.clone()).is_some() {
                return Err(Error::Config(format!("modality `{}` registered twice", m.name)));
            }
        }
        Ok(Registry { modalities })
    }

    pub fn get(&self, name: &str) -> Result<&ModalitySpec> {
        self.modalities.get(name).ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modalities.keys().map(String::as_str)
    }
}

/// One dataset of square tiles observed by a fixed subset of modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Tile side in meters.
    pub tile_size: f64,
    pub modalities: Vec<String>,
    pub batch_size: usize,
    /// Allowed patch sides in meters.
    pub patch_sizes: Vec<f64>,
    pub num_tiles: usize,
    /// Relative sampling weight; uniform when absent everywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Meters per label pixel; defaults to the finest patch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_resolution: Option<f64>,
    /// Modalities whose sensor only provides some of the expected channels,
    /// given as the expected-channel index of each stored channel.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub channel_subsets: BTreeMap<String, Vec<usize>>,
}

impl DatasetSpec {
    pub fn finest_patch(&self) -> f64 {
        self.patch_sizes.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn label_resolution(&self) -> f64 {
        self.label_resolution.unwrap_or_else(|| self.finest_patch())
    }
}

/// A dataset whose invariants were checked against a registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedDataset {
    pub spec: DatasetSpec,
    /// Specs of `spec.modalities`, in the same order.
    pub modalities: Vec<ModalitySpec>,
    /// Sub-patch layout per (index into `patch_sizes`, non-context modality).
    pub layouts: BTreeMap<(usize, String), SubPatchLayout>,
}

impl ValidatedDataset {
    pub fn modality(&self, name: &str) -> Result<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name).ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn patch_index(&self, patch_size: f64) -> Result<usize> {
        self.spec.patch_sizes.iter().position(|&p| (p - patch_size).abs() < 1e-9).ok_or_else(|| Error::Dataset {
            dataset: self.spec.name.clone(),
            reason: format!("patch size {patch_size} m is not among {:?}", self.spec.patch_sizes),
        })
    }

    pub fn layout(&self, patch_size: f64, modality: &str) -> Result<SubPatchLayout> {
        let i = self.patch_index(patch_size)?;
        self.layouts.get(&(i, modality.to_string())).copied().ok_or_else(|| Error::Dataset {
            dataset: self.spec.name.clone(),
            reason: format!("no layout for context or unknown modality `{modality}`"),
        })
    }

    /// Stored side in pixels of a modality's tile array.
    pub fn tile_pixels(&self, modality: &str) -> Result<usize> {
        let m = self.modality(modality)?;
        if m.is_context() {
            return Ok(1);
        }
        exact_ratio(self.spec.tile_size, m.resolution).ok_or_else(|| Error::Layout(format!("S/R = {}/{}", self.spec.tile_size, m.resolution)))
    }

    /// Channels stored on disk for a modality (the present subset when padded).
    pub fn stored_channels(&self, modality: &str) -> Result<Vec<usize>> {
        let m = self.modality(modality)?;
        Ok(match self.spec.channel_subsets.get(modality) {
            Some(present) => present.clone(),
            None => (0..m.channels).collect(),
        })
    }

    pub fn normal_modalities(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.modalities.iter().filter(|m| !m.is_context())
    }

    pub fn context_modalities(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.modalities.iter().filter(|m| m.is_context())
    }
}

/// Checks every dataset invariant and precomputes the sub-patch layouts.
pub fn validate_dataset_spec(spec: &DatasetSpec, registry: &Registry) -> Result<ValidatedDataset> {
    let bad = |reason: String| Error::Dataset { dataset: spec.name.clone(), reason };
    if spec.name.is_empty() {
        return Err(bad("name must be non-empty".into()));
    }
    if spec.modalities.is_empty() {
        return Err(bad("no modalities".into()));
    }
    if spec.batch_size == 0 {
        return Err(bad("batch size must be at least 1".into()));
    }
    if spec.num_tiles == 0 {
        return Err(bad("no tiles".into()));
    }
    if spec.patch_sizes.is_empty() {
        return Err(bad("no patch sizes".into()));
    }
    if spec.weight.is_some_and(|w| !(w > 0.0) || !w.is_finite()) {
        return Err(bad(format!("sampling weight must be positive, got {:?}", spec.weight)));
    }
    let mut modalities = Vec::new();
    for name in &spec.modalities {
        if modalities.iter().any(|m: &ModalitySpec| &m.name == name) {
            return Err(bad(format!("modality `{name}` listed twice")));
        }
        modalities.push(registry.get(name)?.clone());
    }
    if modalities.iter().all(ModalitySpec::is_context) {
        return Err(bad("needs at least one non-context modality".into()));
    }
    for (name, present) in &spec.channel_subsets {
        let m = modalities.iter().find(|m| &m.name == name).ok_or_else(|| Error::UnknownModality(name.clone()))?;
        if present.len() > m.channels {
            return Err(Error::TooManyChannels { have: present.len(), expected: m.channels });
        }
        let mut sorted = present.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if present.is_empty() || sorted.len() != present.len() || sorted.last().is_some_and(|&c| c >= m.channels) {
            return Err(bad(format!("invalid channel subset {present:?} for `{name}`")));
        }
    }
    let mut layouts = BTreeMap::new();
    for (i, &p) in spec.patch_sizes.iter().enumerate() {
        patch_grid(spec.tile_size, p)?;
        for m in modalities.iter().filter(|m| !m.is_context()) {
            exact_ratio(spec.tile_size, m.resolution).ok_or_else(|| {
                Error::Layout(format!("tile side {} m is not a whole number of `{}` pixels", spec.tile_size, m.name))
            })?;
            layouts.insert((i, m.name.clone()), subpatch_layout(p, m.resolution, m.delta)?);
        }
    }
    let label_res = spec.label_resolution();
    if exact_ratio(spec.tile_size, label_res).is_none() {
        return Err(bad(format!("label resolution {label_res} m does not divide the tile")));
    }
    Ok(ValidatedDataset { spec: spec.clone(), modalities, layouts })
}
