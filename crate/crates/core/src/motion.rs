//! Motion data model: feature layout, sequences, edit triplets, dataset
//! manifests, and their on-disk formats.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// One of the four contiguous feature blocks of a pose vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Velocity,
    Orientation,
    Rotation,
    Position,
}

impl Block {
    pub const ALL: [Block; 4] = [
        Block::Velocity,
        Block::Orientation,
        Block::Rotation,
        Block::Position,
    ];
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Block::Velocity => "velocity",
            Block::Orientation => "orientation",
            Block::Rotation => "rotation",
            Block::Position => "position",
        };
        f.write_str(name)
    }
}

/// Sizes of the pose feature blocks, laid out velocity, orientation,
/// rotation, position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLayout {
    #[serde(rename = "v")]
    pub velocity_dims: usize,
    #[serde(rename = "o")]
    pub orientation_dims: usize,
    #[serde(rename = "r")]
    pub rotation_dims: usize,
    #[serde(rename = "p")]
    pub position_dims: usize,
}

impl Default for FeatureLayout {
    /// Root velocity (3), root 6D orientation (6), 21 joints in 6D rotation
    /// (126) and 24 joint positions (72): D = 207.
    fn default() -> Self {
        FeatureLayout::new(3, 6, 126, 72)
    }
}

impl FeatureLayout {
    pub const fn new(velocity: usize, orientation: usize, rotation: usize, position: usize) -> Self {
        FeatureLayout {
            velocity_dims: velocity,
            orientation_dims: orientation,
            rotation_dims: rotation,
            position_dims: position,
        }
    }

    /// Reduced layout used for desk-scale training: D = 15.
    pub const fn reduced() -> Self {
        FeatureLayout::new(3, 0, 6, 6)
    }

    pub fn dim(&self) -> usize {
        self.velocity_dims + self.orientation_dims + self.rotation_dims + self.position_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Layout("feature dimension must be at least 1".into()));
        }
        Ok(())
    }

    pub fn block_dims(&self, block: Block) -> usize {
        match block {
            Block::Velocity => self.velocity_dims,
            Block::Orientation => self.orientation_dims,
            Block::Rotation => self.rotation_dims,
            Block::Position => self.position_dims,
        }
    }

    /// Column range `start..end` of a block.
    pub fn block_range(&self, block: Block) -> std::ops::Range<usize> {
        let start = match block {
            Block::Velocity => 0,
            Block::Orientation => self.velocity_dims,
            Block::Rotation => self.velocity_dims + self.orientation_dims,
            Block::Position => self.velocity_dims + self.orientation_dims + self.rotation_dims,
        };
        start..start + self.block_dims(block)
    }
}

/// F x D matrix of pose features plus its layout and frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Array2<f64>,
    layout: FeatureLayout,
    frame_rate: f64,
}

impl MotionSequence {
    pub fn new(frames: Array2<f64>, layout: FeatureLayout, frame_rate: f64) -> Result<Self> {
        layout.validate()?;
        if frames.nrows() == 0 {
            return Err(Error::Validation("motion must have at least one frame".into()));
        }
        if frames.ncols() != layout.dim() {
            return Err(Error::Layout(format!(
                "frames have {} columns but layout has D={}",
                frames.ncols(),
                layout.dim()
            )));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / frames.ncols(), pos % frames.ncols());
            return Err(Error::Validation(format!("non-finite value at frame {r}, dim {c}")));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Validation(format!("invalid frame rate {frame_rate}")));
        }
        Ok(MotionSequence {
            frames,
            layout,
            frame_rate,
        })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// View of the columns belonging to `block`.
    pub fn slice_block(&self, block: Block) -> Result<ArrayView2<'_, f64>> {
        if self.layout.block_dims(block) == 0 {
            return Err(Error::Config(format!("{block} block has zero size in this layout")));
        }
        let range = self.layout.block_range(block);
        Ok(self.frames.slice(s![.., range]))
    }
}

/// Source motion, edited target motion and the instruction relating them.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTriplet {
    pub id: String,
    pub source: MotionSequence,
    pub target: MotionSequence,
    pub instruction: String,
    /// Ground-truth edited frames of the target (synthetic data only).
    pub edit_mask: Option<Vec<bool>>,
}

impl EditTriplet {
    pub fn new(
        id: impl Into<String>,
        source: MotionSequence,
        target: MotionSequence,
        instruction: impl Into<String>,
        edit_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let triplet = EditTriplet {
            id: id.into(),
            source,
            target,
            instruction: instruction.into(),
            edit_mask,
        };
        triplet.validate()?;
        Ok(triplet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.layout() != self.target.layout() {
            return Err(Error::Layout("source and target layouts differ".into()));
        }
        if let Some(mask) = &self.edit_mask {
            if mask.len() != self.target.len() {
                return Err(Error::Validation(format!(
                    "edit mask has length {} but target has {} frames",
                    mask.len(),
                    self.target.len()
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        self.source.layout()
    }
}

fn matrix_to_json(m: &Array2<f64>) -> Value {
    Value::Array(
        m.rows()
            .into_iter()
            .map(|row| Value::Array(row.iter().map(|&v| json!(v)).collect()))
            .collect(),
    )
}

fn matrix_from_json(value: &Value, field: &str, dim: usize) -> Result<Array2<f64>> {
    let rows = value
        .as_array()
        .ok_or_else(|| Error::format(field, "expected an array of frame rows"))?;
    if rows.is_empty() {
        return Err(Error::format(field, "no frames"));
    }
    let mut data = Vec::with_capacity(rows.len() * dim);
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| Error::format(field, format!("row {i} is not an array")))?;
        if row.len() != dim {
            return Err(Error::Layout(format!(
                "{field} row {i} has {} entries but layout has D={dim}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            let v = v
                .as_f64()
                .ok_or_else(|| Error::format(field, format!("entry ({i}, {j}) is not a number")))?;
            data.push(v);
        }
    }
    Array2::from_shape_vec((rows.len(), dim), data).map_err(|e| Error::format(field, e.to_string()))
}

fn required<'a>(doc: &'a Value, field: &str) -> Result<&'a Value> {
    doc.get(field)
        .ok_or_else(|| Error::format(field, "missing required field"))
}

/// Serializes a triplet into its JSON document.
pub fn triplet_to_json(triplet: &EditTriplet) -> Result<String> {
    triplet.validate()?;
    let layout = triplet.layout();
    let mut doc = json!({
        "id": triplet.id,
        "instruction": triplet.instruction,
        "frame_rate": triplet.source.frame_rate(),
        "layout": layout,
        "source": matrix_to_json(triplet.source.frames()),
        "target": matrix_to_json(triplet.target.frames()),
    });
    if let Some(mask) = &triplet.edit_mask {
        doc["edit_mask"] = Value::Array(mask.iter().map(|&b| json!(u8::from(b))).collect());
    }
    serde_json::to_string(&doc).map_err(|e| Error::format("triplet", e.to_string()))
}

/// Parses a triplet JSON document, checking it against `layout` when given.
pub fn triplet_from_json(text: &str, layout: Option<FeatureLayout>) -> Result<EditTriplet> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::format("document", e.to_string()))?;
    let id = required(&doc, "id")?
        .as_str()
        .ok_or_else(|| Error::format("id", "expected a string"))?
        .to_owned();
    let instruction = required(&doc, "instruction")?
        .as_str()
        .ok_or_else(|| Error::format("instruction", "expected a string"))?
        .to_owned();
    let frame_rate = required(&doc, "frame_rate")?
        .as_f64()
        .ok_or_else(|| Error::format("frame_rate", "expected a number"))?;
    let file_layout: FeatureLayout = serde_json::from_value(required(&doc, "layout")?.clone())
        .map_err(|e| Error::format("layout", e.to_string()))?;
    let layout = match layout {
        Some(expected) if expected != file_layout => {
            return Err(Error::Layout(format!(
                "file layout {file_layout:?} does not match expected {expected:?}"
            )))
        }
        Some(expected) => expected,
        None => file_layout,
    };
    layout.validate()?;
    let source = matrix_from_json(required(&doc, "source")?, "source", layout.dim())?;
    let target = matrix_from_json(required(&doc, "target")?, "target", layout.dim())?;
    let edit_mask = match doc.get("edit_mask") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| match v.as_u64() {
                    Some(0) => Ok(false),
                    Some(1) => Ok(true),
                    _ => Err(Error::format("edit_mask", "entries must be 0 or 1")),
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        Some(_) => return Err(Error::format("edit_mask", "expected an array")),
    };
    EditTriplet::new(
        id,
        MotionSequence::new(source, layout, frame_rate)?,
        MotionSequence::new(target, layout, frame_rate)?,
        instruction,
        edit_mask,
    )
}

/// Reads and validates a triplet file against `layout`.
pub fn load_triplet(path: impl AsRef<Path>, layout: FeatureLayout) -> Result<EditTriplet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    triplet_from_json(&text, Some(layout))
}

/// Like [`load_triplet`] but takes the layout from the file itself.
pub fn load_triplet_any(path: impl AsRef<Path>) -> Result<EditTriplet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    triplet_from_json(&text, None)
}

pub fn save_triplet(triplet: &EditTriplet, path: impl AsRef<Path>) -> Result<()> {
    let text = triplet_to_json(triplet)?;
    write_file(path.as_ref(), text.as_bytes())
}

/// Standalone motion file: `{layout, frame_rate, frames}`.
pub fn motion_to_json(motion: &MotionSequence, extra: Option<(&str, Value)>) -> Result<String> {
    let mut doc = json!({
        "layout": motion.layout(),
        "frame_rate": motion.frame_rate(),
        "frames": matrix_to_json(motion.frames()),
    });
    if let Some((key, value)) = extra {
        doc[key] = value;
    }
    serde_json::to_string(&doc).map_err(|e| Error::format("motion", e.to_string()))
}

pub fn motion_from_json(text: &str) -> Result<MotionSequence> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::format("document", e.to_string()))?;
    let layout: FeatureLayout = serde_json::from_value(required(&doc, "layout")?.clone())
        .map_err(|e| Error::format("layout", e.to_string()))?;
    layout.validate()?;
    let frame_rate = required(&doc, "frame_rate")?
        .as_f64()
        .ok_or_else(|| Error::format("frame_rate", "expected a number"))?;
    let frames = matrix_from_json(required(&doc, "frames")?, "frames", layout.dim())?;
    MotionSequence::new(frames, layout, frame_rate)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            None => s.serialize_none(),
            Some(v) if v.is_infinite() && *v > 0.0 => s.serialize_str("inf"),
            Some(v) => s.serialize_f64(*v),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(v)) => Ok(Some(v)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad snr value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Triplet file path, relative to the manifest's directory.
    pub path: String,
    /// MotionSNR; `None` until analyzed, `"inf"` on disk when infinite.
    #[serde(with = "snr_serde")]
    pub snr: Option<f64>,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub split: Split,
    pub snr_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Ordered list of triplet entries for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = DatasetManifest {
            header: ManifestHeader {
                split,
                snr_threshold: 0.0,
                config_hash: None,
            },
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::Consistency(format!("duplicate id {}", entry.id)));
            }
            if let Some(snr) = entry.snr {
                let expected = snr >= self.header.snr_threshold;
                if entry.included != expected {
                    return Err(Error::Consistency(format!(
                        "entry {} included={} disagrees with threshold {}",
                        entry.id, entry.included, self.header.snr_threshold
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self) -> Split {
        self.header.split
    }

    pub fn included(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.included)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header).map_err(|e| Error::format("header", e.to_string()))?;
        out.push('\n');
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).map_err(|e| Error::format("entry", e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("header", "empty manifest"))?;
        let header: ManifestHeader =
            serde_json::from_str(header_line).map_err(|e| Error::format("header", e.to_string()))?;
        let entries = lines
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| Error::format(format!("entry {i}"), e.to_string()))
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let manifest = DatasetManifest { header, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Loads every included triplet, resolving paths against `base_dir`.
    pub fn load_included(&self, base_dir: &Path, layout: Option<FeatureLayout>) -> Result<Vec<EditTriplet>> {
        Self::load_entries(self.included(), base_dir, layout)
    }

    /// Loads every entry regardless of its included flag.
    pub fn load_all(&self, base_dir: &Path, layout: Option<FeatureLayout>) -> Result<Vec<EditTriplet>> {
        Self::load_entries(self.entries.iter(), base_dir, layout)
    }

    fn load_entries<'e>(
        entries: impl Iterator<Item = &'e ManifestEntry>,
        base_dir: &Path,
        layout: Option<FeatureLayout>,
    ) -> Result<Vec<EditTriplet>> {
        entries
            .map(|entry| {
                let path = base_dir.join(&entry.path);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let triplet = triplet_from_json(&text, layout)?;
                if triplet.id != entry.id {
                    return Err(Error::Consistency(format!(
                        "manifest id {} but file carries id {}",
                        entry.id, triplet.id
                    )));
                }
                Ok(triplet)
            })
            .collect()
    }
}
