//! File formats.
//!
//! Label maps are indexed 8-bit PNGs with the Pascal palette; boundary maps are
//! 8- or 16-bit grayscale PNGs; annotations, proposal lists, detections and
//! manifests are JSON. Relative paths inside JSON files resolve against the
//! directory of the file that names them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use boxlabel_core::metrics::GtInstance;
use boxlabel_core::{
    clip_box, BBox, BoundaryMap, BoxSet, Detection, DetectionSet, Dims, Error as CoreError, Image, LabelMap,
    ProposalSet, SegmentMask,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, CoreContext, Result};
use crate::palette::PALETTE;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| AppError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Internal(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(rel)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub class_id: i64,
    pub xmin: i64,
    pub ymin: i64,
    pub xmax: i64,
    pub ymax: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image_width: usize,
    pub image_height: usize,
    pub boxes: Vec<BoxRecord>,
}

impl AnnotationFile {
    pub fn from_boxes(boxes: &BoxSet) -> Self {
        let dims = boxes.dims();
        Self {
            image_width: dims.width,
            image_height: dims.height,
            boxes: boxes
                .iter()
                .map(|b| BoxRecord {
                    class_id: b.class_id as i64,
                    xmin: b.rect.x0 as i64,
                    ymin: b.rect.y0 as i64,
                    xmax: b.rect.x1 as i64,
                    ymax: b.rect.y1 as i64,
                })
                .collect(),
        }
    }
}

fn to_i32(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// Validates, clips and orders the boxes of an annotation file.
pub fn boxes_from_records(
    records: &[BoxRecord],
    dims: Dims,
    num_classes: u8,
) -> std::result::Result<BoxSet, CoreError> {
    let mut boxes = Vec::with_capacity(records.len());
    for r in records {
        if r.xmax <= r.xmin || r.ymax <= r.ymin {
            return Err(CoreError::DegenerateBox {
                xmin: r.xmin,
                ymin: r.ymin,
                xmax: r.xmax,
                ymax: r.ymax,
            });
        }
        if r.class_id < 1 || r.class_id > num_classes as i64 {
            return Err(CoreError::UnknownClassId {
                class_id: r.class_id,
                max: num_classes,
            });
        }
        let b = BBox::new(
            r.class_id as u8,
            to_i32(r.xmin),
            to_i32(r.ymin),
            to_i32(r.xmax),
            to_i32(r.ymax),
        );
        boxes.push(clip_box(&b, dims)?);
    }
    BoxSet::new(boxes, dims)
}

pub fn read_annotations(path: &Path, num_classes: u8) -> Result<BoxSet> {
    let file: AnnotationFile = read_json(path)?;
    let dims = Dims::new(file.image_width, file.image_height);
    if dims.is_empty() {
        return Err(AppError::format(path, "image dimensions must be positive"));
    }
    boxes_from_records(&file.boxes, dims, num_classes).context(path.display())
}

pub fn write_annotations(boxes: &BoxSet, path: &Path) -> Result<()> {
    write_json(&AnnotationFile::from_boxes(boxes), path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| AppError::format(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.pixels().map(|p| p.0).collect();
    Image::new(w, h, pixels).context(path.display())
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u8> = img.pixels().iter().flatten().copied().collect();
    encode_png(
        path,
        img.width(),
        img.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        None,
        &raw,
    )
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    colour: png::ColorType,
    depth: png::BitDepth,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(colour);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let encode_err = |e: png::EncodingError| AppError::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

struct RawPng {
    width: usize,
    height: usize,
    colour: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<RawPng> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| AppError::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| AppError::format(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| AppError::format(path, e.to_string()))?;
    data.truncate(info.buffer_size());
    Ok(RawPng {
        width: info.width as usize,
        height: info.height as usize,
        colour: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Writes an indexed PNG carrying the Pascal palette.
pub fn write_labelmap(map: &LabelMap, path: &Path) -> Result<()> {
    let palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
    encode_png(
        path,
        map.width(),
        map.height(),
        png::ColorType::Indexed,
        png::BitDepth::Eight,
        Some(palette),
        map.labels(),
    )
}

/// Reads an 8-bit indexed or grayscale PNG; pixel values are the labels.
pub fn read_labelmap(path: &Path) -> Result<LabelMap> {
    let raw = decode_png(path)?;
    match (raw.colour, raw.depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {
            LabelMap::new(raw.width, raw.height, raw.data).context(path.display())
        }
        (c, d) => Err(AppError::format(
            path,
            format!("label maps must be 8-bit indexed or grayscale, found {c:?} at {d:?}"),
        )),
    }
}

pub fn read_boundary_map(path: &Path) -> Result<BoundaryMap> {
    let raw = decode_png(path)?;
    if raw.colour != png::ColorType::Grayscale {
        return Err(AppError::format(
            path,
            format!("boundary maps must be grayscale, found {:?}", raw.colour),
        ));
    }
    let values: Vec<f64> = match raw.depth {
        png::BitDepth::Eight => raw.data.iter().map(|&v| v as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => raw
            .data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        d => return Err(AppError::format(path, format!("unsupported bit depth {d:?}"))),
    };
    BoundaryMap::new(Dims::new(raw.width, raw.height), values).context(path.display())
}

/// 16-bit grayscale.
pub fn write_boundary_map(map: &BoundaryMap, path: &Path) -> Result<()> {
    let data: Vec<u8> = map
        .values()
        .iter()
        .flat_map(|&v| ((v * 65535.0).round() as u16).to_be_bytes())
        .collect();
    let d = map.dims();
    encode_png(
        path,
        d.width,
        d.height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        None,
        &data,
    )
}

/// Any image file, thresholded at > 127 on its luminance.
pub fn read_mask(path: &Path, dims: Dims) -> Result<SegmentMask> {
    let img = image::open(path).map_err(|e| AppError::format(path, e.to_string()))?;
    let luma = img.to_luma8();
    let got = Dims::new(luma.width() as usize, luma.height() as usize);
    dims.check(got).context(path.display())?;
    SegmentMask::from_bits(dims, luma.pixels().map(|p| p.0[0] > 127).collect()).context(path.display())
}

/// 0/255 grayscale.
pub fn write_mask(mask: &SegmentMask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let d = mask.dims();
    encode_png(
        path,
        d.width,
        d.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        None,
        &data,
    )
}

pub const PROPOSAL_MANIFEST: &str = "proposals.json";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProposalManifest {
    pub masks: Vec<PathBuf>,
}

/// Reads `proposals.json` in `dir`.
pub fn read_proposals(dir: &Path, dims: Dims) -> Result<ProposalSet> {
    let manifest_path = dir.join(PROPOSAL_MANIFEST);
    let manifest: ProposalManifest = read_json(&manifest_path)?;
    let masks = manifest
        .masks
        .iter()
        .map(|m| read_mask(&resolve(&manifest_path, m), dims))
        .collect::<Result<Vec<_>>>()?;
    ProposalSet::new(masks, dims).context(dir.display())
}

pub fn write_proposals(set: &ProposalSet, dir: &Path) -> Result<()> {
    let mut names = Vec::with_capacity(set.len());
    for (i, m) in set.masks.iter().enumerate() {
        let name = PathBuf::from(format!("m{i}.png"));
        write_mask(m, &dir.join(&name))?;
        names.push(name);
    }
    write_json(&ProposalManifest { masks: names }, &dir.join(PROPOSAL_MANIFEST))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxCoords {
    pub xmin: i64,
    pub ymin: i64,
    pub xmax: i64,
    pub ymax: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class_id: i64,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoxCoords,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DetectionFile {
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: i64,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InstanceFile {
    pub instances: Vec<InstanceRecord>,
}

/// One image or a list of images.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerImage<T> {
    Many { images: Vec<T> },
    One(T),
}

impl<T> PerImage<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            PerImage::Many { images } => images,
            PerImage::One(t) => vec![t],
        }
    }
}

fn class_u8(path: &Path, class_id: i64) -> Result<u8> {
    u8::try_from(class_id)
        .ok()
        .filter(|&c| c >= 1 && c != boxlabel_core::IGNORE)
        .ok_or_else(|| AppError::format(path, format!("class id {class_id} out of range")))
}

/// Mask dimensions come from the first mask read; all others must match.
fn load_mask_any(path: &Path, dims: &mut Option<Dims>) -> Result<SegmentMask> {
    match *dims {
        Some(d) => read_mask(path, d),
        None => {
            let img = image::open(path).map_err(|e| AppError::format(path, e.to_string()))?;
            let d = Dims::new(img.width() as usize, img.height() as usize);
            *dims = Some(d);
            read_mask(path, d)
        }
    }
}

/// Detections per image, each set sorted by descending score. Mask paths are
/// relative to the detection file.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionSet>> {
    let file: PerImage<DetectionFile> = read_json(path)?;
    let mut dims = None;
    file.into_vec()
        .into_iter()
        .map(|f| {
            let dets = f
                .detections
                .iter()
                .map(|d| {
                    let class_id = class_u8(path, d.class_id)?;
                    let mask = d
                        .mask
                        .as_ref()
                        .map(|m| load_mask_any(&resolve(path, m), &mut dims))
                        .transpose()?;
                    let b = &d.bbox;
                    Ok(Detection {
                        class_id,
                        bbox: BBox::new(class_id, to_i32(b.xmin), to_i32(b.ymin), to_i32(b.xmax), to_i32(b.ymax)),
                        score: d.score,
                        mask,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            DetectionSet::new(dets).context(path.display())
        })
        .collect()
}

/// Ground-truth instances per image. Mask paths are relative to the file.
pub fn read_instances(path: &Path) -> Result<Vec<Vec<GtInstance>>> {
    let file: PerImage<InstanceFile> = read_json(path)?;
    let mut dims = None;
    file.into_vec()
        .into_iter()
        .map(|f| {
            f.instances
                .iter()
                .map(|r| {
                    Ok(GtInstance {
                        class_id: class_u8(path, r.class_id)?,
                        mask: load_mask_any(&resolve(path, &r.mask), &mut dims)?,
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Output file stem; defaults to the image file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// A manifest entry with paths resolved against the manifest location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub boundary: Option<PathBuf>,
    pub proposal_dir: Option<PathBuf>,
    pub gt_labels: Option<PathBuf>,
}

impl Entry {
    /// Every file this entry references, proposal manifests included.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut v = vec![self.image.clone(), self.annotation.clone()];
        v.extend(self.boundary.clone());
        v.extend(self.proposal_dir.as_ref().map(|d| d.join(PROPOSAL_MANIFEST)));
        v.extend(self.gt_labels.clone());
        v
    }
}

/// Loads a manifest and checks that every referenced file exists and that ids
/// are unique.
pub fn read_manifest(path: &Path) -> Result<Vec<Entry>> {
    let m: DatasetManifest = read_json(path)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::with_capacity(m.entries.len());
    for e in m.entries {
        let image = resolve(path, &e.image_path);
        let id = match e.id {
            Some(id) => id,
            None => image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| AppError::format(path, format!("cannot derive an id from {}", image.display())))?,
        };
        if !seen.insert(id.clone()) {
            return Err(AppError::format(path, format!("duplicate entry id {id:?}")));
        }
        let entry = Entry {
            id,
            image,
            annotation: resolve(path, &e.annotation_path),
            boundary: e.boundary_path.map(|p| resolve(path, &p)),
            proposal_dir: e.proposal_dir.map(|p| resolve(path, &p)),
            gt_labels: e.gt_label_path.map(|p| resolve(path, &p)),
        };
        if let Some(missing) = entry.files().into_iter().find(|f| !f.is_file()) {
            return Err(AppError::Data(format!(
                "{}: referenced file {} does not exist",
                path.display(),
                missing.display()
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}
