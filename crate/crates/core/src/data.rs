//! Synthetic tooth/lesion dataset generation and COCO-style annotation IO.
//!
//! Generated images show a bright, gently curved "tooth" band with darker
//! separation lines on a dark background. Lesions are low-contrast dark
//! ellipses on the band (two classes by size); distractors are similar
//! ellipses off the band. Annotations cover lesions and distractors only.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::imgproc::RgbImage;
use crate::ldlr::BBox;
use crate::par::par_map;

pub const CLASS_NAMES: [&str; 3] = ["lesion-small", "lesion-large", "distractor"];
const CLASS_LESION_SMALL: usize = 0;
const CLASS_LESION_LARGE: usize = 1;
const CLASS_DISTRACTOR: usize = 2;

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Extra pool for self-supervised pretraining, disjoint from the
    /// supervised splits by construction (distinct image ids and rng
    /// substreams).
    pub pretrain: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            train: 300,
            val: 60,
            test: 60,
            pretrain: 220,
            min_objects: 1,
            max_objects: 4,
            seed: 0,
        }
    }
}

/// One rendered object with its pixel-space `[x, y, w, h]` box.
#[derive(Clone, Debug)]
pub struct SynthObject {
    pub class: usize,
    pub bbox_px: [f64; 4],
}

/// A rendered image plus the geometry the renderer used, for tests that
/// probe e.g. band-border gradient statistics.
#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    pub objects: Vec<SynthObject>,
    pub band_center: Vec<f64>,
    pub band_half: f64,
}

fn image_rng(seed: u64, image_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ image_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Deterministically render image `image_index` of the corpus.
pub fn render_image(spec: &SyntheticSpec, image_index: u64) -> RenderedImage {
    let size = spec.image_size;
    assert!(size >= 32, "synthetic images need at least 32x32 pixels");
    let s = size as f64;
    let mut rng = image_rng(spec.seed, image_index);

    let bg_base = rng.gen_range(16.0..30.0);
    let band_level = rng.gen_range(190.0..225.0);
    let center0 = s * 0.5 + rng.gen_range(-5.0..5.0);
    let amp = rng.gen_range(2.0..6.0);
    let phase = rng.gen_range(0.0..TAU);
    let half = rng.gen_range(9.0..13.0);
    let gap_period = rng.gen_range(10.0..16.0);
    let gap_offset = rng.gen_range(0.0..gap_period);
    let gap_depth = rng.gen_range(30.0..60.0);

    let band_center: Vec<f64> = (0..size)
        .map(|x| center0 + amp * (TAU * x as f64 / s + phase).sin())
        .collect();

    // base layer: background, band with soft edges, tooth separation gaps
    let mut gray = vec![0.0f64; size * size];
    let mut band_alpha = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let dist = (y as f64 - band_center[x]).abs();
            let alpha = 1.0 / (1.0 + (2.0 * (dist - half)).exp());
            let m = (x as f64 - gap_offset).rem_euclid(gap_period);
            let gap_d = m.min(gap_period - m);
            let gap = gap_depth * (-gap_d * gap_d / (2.0 * 0.7 * 0.7)).exp();
            let base = bg_base + rng.gen_range(-6.0..6.0);
            let band_val = band_level + rng.gen_range(-6.0..6.0) - gap;
            gray[y * size + x] = base + alpha * (band_val - base);
            band_alpha[y * size + x] = alpha;
        }
    }

    // objects
    let n_obj = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SynthObject> = Vec::with_capacity(n_obj);
    let mut deltas: Vec<(f64, f64, f64, f64, f64)> = Vec::new(); // cx, cy, rx, ry, delta
    for _ in 0..n_obj {
        let class = rng.gen_range(0..3usize);
        let mut shrink = 1.0;
        for attempt in 0..60 {
            if attempt > 0 && attempt % 15 == 0 {
                shrink *= 0.85;
            }
            let (rx, ry) = match class {
                CLASS_LESION_SMALL => (rng.gen_range(2.0..3.5), rng.gen_range(2.0..3.5)),
                CLASS_LESION_LARGE => (
                    rng.gen_range(4.0..7.0) * shrink,
                    rng.gen_range(4.0..7.0) * shrink,
                ),
                _ => (
                    rng.gen_range(2.5..6.0) * shrink,
                    rng.gen_range(2.5..6.0) * shrink,
                ),
            };
            let rx = f64::max(rx, 2.0);
            let ry = f64::max(ry, 2.0);
            let xc = rng.gen_range(rx + 1.5..s - rx - 1.5);
            let yc = if class == CLASS_DISTRACTOR {
                let c = band_center[xc as usize];
                let above = (ry + 1.5, c - half - ry - 3.0);
                let below = (c + half + ry + 3.0, s - ry - 1.5);
                let mut sides = Vec::new();
                if above.1 > above.0 {
                    sides.push(above);
                }
                if below.1 > below.0 {
                    sides.push(below);
                }
                if sides.is_empty() {
                    continue;
                }
                let side = sides[rng.gen_range(0..sides.len())];
                rng.gen_range(side.0..side.1)
            } else {
                let c = band_center[xc as usize];
                let room = half - ry - 1.0;
                if room <= 0.0 {
                    continue;
                }
                c + rng.gen_range(-room..room)
            };
            if yc - ry < 1.0 || yc + ry > s - 1.0 {
                continue;
            }
            let candidate = BBox::new(xc / s, yc / s, 2.0 * rx / s, 2.0 * ry / s);
            let overlaps = objects.iter().any(|o| {
                let b = BBox::new(
                    (o.bbox_px[0] + o.bbox_px[2] * 0.5) / s,
                    (o.bbox_px[1] + o.bbox_px[3] * 0.5) / s,
                    o.bbox_px[2] / s,
                    o.bbox_px[3] / s,
                );
                crate::ldlr::iou(&candidate, &b) > 0.25
            });
            if overlaps {
                continue;
            }
            let delta = match class {
                CLASS_DISTRACTOR => rng.gen_range(35.0..60.0),
                _ => -rng.gen_range(32.0..55.0),
            };
            objects.push(SynthObject {
                class,
                bbox_px: [xc - rx, yc - ry, 2.0 * rx, 2.0 * ry],
            });
            deltas.push((xc, yc, rx, ry, delta));
            break;
        }
    }

    for &(xc, yc, rx, ry, delta) in &deltas {
        let x0 = ((xc - rx - 1.0).floor().max(0.0)) as usize;
        let x1 = ((xc + rx + 1.0).ceil().min(s - 1.0)) as usize;
        let y0 = ((yc - ry - 1.0).floor().max(0.0)) as usize;
        let y1 = ((yc + ry + 1.0).ceil().min(s - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 - xc) / rx;
                let dy = (y as f64 - yc) / ry;
                let m = dx * dx + dy * dy;
                if m < 1.0 {
                    let soft = ((1.0 - m) / 0.3).clamp(0.0, 1.0);
                    gray[y * size + x] += soft * delta;
                }
            }
        }
    }

    // slight yellow tint on the band keeps the RGB channels distinct
    let mut data = Vec::with_capacity(3 * size * size);
    for i in 0..size * size {
        let g = gray[i];
        let r = g;
        let gg = g;
        let b = g - 12.0 * band_alpha[i];
        data.push(r.clamp(0.0, 255.0).round() as u8);
        data.push(gg.clamp(0.0, 255.0).round() as u8);
        data.push(b.clamp(0.0, 255.0).round() as u8);
    }
    RenderedImage {
        rgb: RgbImage::new(size, size, data).expect("sized buffer"),
        objects,
        band_center,
        band_half: half,
    }
}

// ---- COCO-style serialization ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// Pixel-space `[x, y, w, h]`.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitSummary {
    pub name: String,
    pub dir: PathBuf,
    pub images: usize,
    pub annotations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GenSummary {
    pub root: PathBuf,
    pub splits: Vec<SplitSummary>,
}

/// Generate the corpus under `out_dir/{train,val,test,pretrain}` with
/// globally disjoint image ids. Byte-identical output for identical specs.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<GenSummary> {
    let splits = [
        ("train", spec.train),
        ("val", spec.val),
        ("test", spec.test),
        ("pretrain", spec.pretrain),
    ];
    let mut summary = GenSummary {
        root: out_dir.to_path_buf(),
        splits: Vec::new(),
    };
    let mut next_id: u64 = 0;
    let mut next_ann_id: u64 = 0;
    for (name, count) in splits {
        let dir = out_dir.join(name);
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir)?;
        let ids: Vec<u64> = (next_id..next_id + count as u64).collect();
        let rendered: Vec<Result<(u64, Vec<SynthObject>)>> = par_map(&ids, |&id| {
            let img = render_image(spec, id);
            let path = img_dir.join(format!("img_{id:05}.png"));
            img.rgb.save_png(&path)?;
            Ok((id, img.objects))
        });
        let mut coco = CocoFile {
            images: Vec::with_capacity(count),
            annotations: Vec::new(),
            categories: CLASS_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| CocoCategory {
                    id: i as u32 + 1,
                    name: (*n).to_string(),
                })
                .collect(),
        };
        for item in rendered {
            let (id, objects) = item?;
            coco.images.push(CocoImage {
                id,
                file_name: format!("images/img_{id:05}.png"),
                width: spec.image_size as u32,
                height: spec.image_size as u32,
            });
            for obj in objects {
                coco.annotations.push(CocoAnnotation {
                    id: next_ann_id,
                    image_id: id,
                    category_id: obj.class as u32 + 1,
                    bbox: obj.bbox_px,
                    area: obj.bbox_px[2] * obj.bbox_px[3],
                    iscrowd: 0,
                });
                next_ann_id += 1;
            }
        }
        let ann_count = coco.annotations.len();
        std::fs::write(dir.join("annotations.json"), serde_json::to_vec_pretty(&coco)?)?;
        summary.splits.push(SplitSummary {
            name: name.to_string(),
            dir,
            images: count,
            annotations: ann_count,
        });
        next_id += count as u64;
    }
    Ok(summary)
}

// ---- loading ----

#[derive(Clone, Debug)]
pub struct DatasetImage {
    pub id: u64,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
}

/// A loaded split: images plus normalized cxcywh ground truths per image.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
    /// Ground truths aligned with `images`.
    pub gts: Vec<Vec<(BBox, usize)>>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load_rgb(&self, index: usize) -> Result<RgbImage> {
        RgbImage::load_png(&self.images[index].path)
    }

    /// Flattened ground truths for the evaluator.
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        let mut out = Vec::new();
        for (img, gts) in self.images.iter().zip(&self.gts) {
            for &(bbox, class) in gts {
                out.push(GroundTruth {
                    image_id: img.id,
                    class,
                    bbox,
                });
            }
        }
        out
    }

    pub fn max_objects_per_image(&self) -> usize {
        self.gts.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Load `root/annotations.json` (+ `root/images/`), validating referential
/// integrity and bounds; errors name the offending ids.
pub fn load_coco(root: &Path) -> Result<Dataset> {
    let ann_path = root.join("annotations.json");
    let bytes = std::fs::read(&ann_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", ann_path.display())))?;
    let coco: CocoFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Dataset(format!("{}: {e}", ann_path.display())))?;

    let mut categories = coco.categories.clone();
    categories.sort_by_key(|c| c.id);
    let class_names: Vec<String> = categories.iter().map(|c| c.name.clone()).collect();
    let class_of = |category_id: u32| -> Option<usize> {
        categories.iter().position(|c| c.id == category_id)
    };

    let mut images = Vec::with_capacity(coco.images.len());
    for ci in &coco.images {
        if coco.images.iter().filter(|o| o.id == ci.id).count() > 1 {
            return Err(Error::Dataset(format!("duplicate image id {}", ci.id)));
        }
        images.push(DatasetImage {
            id: ci.id,
            path: root.join(&ci.file_name),
            width: ci.width as usize,
            height: ci.height as usize,
        });
    }
    let index_of_image = |id: u64| images.iter().position(|i| i.id == id);

    let mut gts: Vec<Vec<(BBox, usize)>> = vec![Vec::new(); images.len()];
    for ann in &coco.annotations {
        let img_idx = index_of_image(ann.image_id).ok_or_else(|| {
            Error::Dataset(format!(
                "annotation {} references unknown image id {}",
                ann.id, ann.image_id
            ))
        })?;
        let class = class_of(ann.category_id).ok_or_else(|| {
            Error::Dataset(format!(
                "annotation {} references unknown category id {}",
                ann.id, ann.category_id
            ))
        })?;
        let img = &images[img_idx];
        let (w, h) = (img.width as f64, img.height as f64);
        let [x, y, bw, bh] = ann.bbox;
        if bw <= 0.0 || bh <= 0.0 || x < -1e-6 || y < -1e-6 || x + bw > w + 1e-6 || y + bh > h + 1e-6
        {
            return Err(Error::Dataset(format!(
                "annotation {} bbox {:?} outside image {} bounds {}x{}",
                ann.id, ann.bbox, ann.image_id, img.width, img.height
            )));
        }
        gts[img_idx].push((
            BBox::new((x + bw / 2.0) / w, (y + bh / 2.0) / h, bw / w, bh / h),
            class,
        ));
    }
    Ok(Dataset {
        images,
        gts,
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            train: 4,
            val: 2,
            test: 2,
            pretrain: 3,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn render_is_deterministic_and_boxes_inside() {
        let spec = tiny_spec(7);
        let a = render_image(&spec, 3);
        let b = render_image(&spec, 3);
        assert_eq!(a.rgb.data(), b.rgb.data());
        assert!(!a.objects.is_empty());
        let s = spec.image_size as f64;
        for o in &a.objects {
            let [x, y, w, h] = o.bbox_px;
            assert!(x >= 0.0 && y >= 0.0 && x + w <= s && y + h <= s);
            assert!(w >= 4.0 && h >= 4.0, "min box side: {w}x{h}");
        }
    }

    #[test]
    fn generation_roundtrip_and_disjoint_ids() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(11);
        let summary = gen_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(summary.splits.len(), 4);

        let train = load_coco(&dir.path().join("train")).unwrap();
        let val = load_coco(&dir.path().join("val")).unwrap();
        let test = load_coco(&dir.path().join("test")).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(train.class_names.len(), 3);

        let mut all_ids: Vec<u64> = Vec::new();
        for ds in [&train, &val, &test] {
            all_ids.extend(ds.images.iter().map(|i| i.id));
        }
        let unique: std::collections::BTreeSet<u64> = all_ids.iter().copied().collect();
        assert_eq!(unique.len(), all_ids.len(), "split ids overlap");

        // normalized -> pixel round trip
        let spec_px = render_image(&spec, 0);
        let loaded = &train.gts[0];
        assert_eq!(loaded.len(), spec_px.objects.len());
        let s = spec.image_size as f64;
        for (obj, &(bbox, class)) in spec_px.objects.iter().zip(loaded) {
            assert_eq!(class, obj.class);
            let x = (bbox.cx - bbox.w / 2.0) * s;
            let y = (bbox.cy - bbox.h / 2.0) * s;
            assert!((x - obj.bbox_px[0]).abs() < 1e-9);
            assert!((y - obj.bbox_px[1]).abs() < 1e-9);
            assert!((bbox.w * s - obj.bbox_px[2]).abs() < 1e-9);
            assert!((bbox.h * s - obj.bbox_px[3]).abs() < 1e-9);
        }
    }

    #[test]
    fn dangling_image_id_is_rejected_with_id_in_message() {
        let dir = tempfile::tempdir().unwrap();
        let coco = CocoFile {
            images: vec![CocoImage {
                id: 1,
                file_name: "images/a.png".into(),
                width: 64,
                height: 64,
            }],
            annotations: vec![CocoAnnotation {
                id: 17,
                image_id: 99,
                category_id: 1,
                bbox: [1.0, 1.0, 4.0, 4.0],
                area: 16.0,
                iscrowd: 0,
            }],
            categories: vec![CocoCategory {
                id: 1,
                name: "lesion-small".into(),
            }],
        };
        std::fs::write(
            dir.path().join("annotations.json"),
            serde_json::to_vec(&coco).unwrap(),
        )
        .unwrap();
        let err = load_coco(dir.path()).unwrap_err().to_string();
        assert!(err.contains("99"), "{err}");
        assert!(err.contains("17"), "{err}");
    }

    #[test]
    fn empty_annotations_load_as_background_only() {
        let dir = tempfile::tempdir().unwrap();
        let coco = CocoFile {
            images: vec![CocoImage {
                id: 0,
                file_name: "images/a.png".into(),
                width: 64,
                height: 64,
            }],
            annotations: vec![],
            categories: vec![CocoCategory {
                id: 1,
                name: "lesion-small".into(),
            }],
        };
        std::fs::write(
            dir.path().join("annotations.json"),
            serde_json::to_vec(&coco).unwrap(),
        )
        .unwrap();
        let ds = load_coco(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.gts[0].is_empty());
    }

    #[test]
    fn out_of_bounds_bbox_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let coco = CocoFile {
            images: vec![CocoImage {
                id: 0,
                file_name: "images/a.png".into(),
                width: 64,
                height: 64,
            }],
            annotations: vec![CocoAnnotation {
                id: 3,
                image_id: 0,
                category_id: 1,
                bbox: [60.0, 60.0, 10.0, 4.0],
                area: 40.0,
                iscrowd: 0,
            }],
            categories: vec![CocoCategory {
                id: 1,
                name: "lesion-small".into(),
            }],
        };
        std::fs::write(
            dir.path().join("annotations.json"),
            serde_json::to_vec(&coco).unwrap(),
        )
        .unwrap();
        assert!(load_coco(dir.path()).is_err());
    }
}
