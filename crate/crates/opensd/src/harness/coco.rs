//! COCO-panoptic-style dataset export and ingestion.
//!
//! Layout: `images/` (8-bit RGB PNGs), `panoptic/` (segment ids encoded in
//! RGB as `id = R + 256*G + 65536*B`), `annotations.json` (images +
//! annotations with `segments_info` + categories), `vocab.json`.
//!
//! Scene pixels are quantized to the 8-bit grid at generation time, so
//! export followed by ingest reproduces annotations and pixels exactly.

use crate::classifiers::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::scene::{Instance, Scene};
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoSegment {
    id: u32,
    category_id: u32,
    area: u64,
    /// Pixel-space [x, y, w, h].
    bbox: [u32; 4],
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    file_name: String,
    segments_info: Vec<CocoSegment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    isthing: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoPanoptic {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn encode_id(id: u32) -> Rgb<u8> {
    Rgb([(id % 256) as u8, ((id / 256) % 256) as u8, ((id / 65536) % 256) as u8])
}

fn decode_id(px: &Rgb<u8>) -> u32 {
    px.0[0] as u32 + 256 * px.0[1] as u32 + 65536 * px.0[2] as u32
}

fn pixel_bbox(mask: &[bool], h: usize, w: usize) -> [u32; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == w {
        return [0, 0, 0, 0];
    }
    [x0 as u32, y0 as u32, (x1 + 1 - x0) as u32, (y1 + 1 - y0) as u32]
}

/// Write a dataset directory.
pub fn export_dataset(dir: &Path, scenes: &[Scene], vocab: &Vocabulary) -> Result<()> {
    let images_dir = dir.join("images");
    let panoptic_dir = dir.join("panoptic");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&panoptic_dir)?;

    let mut images = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.png");
        let (h, w) = (scene.height as u32, scene.width as u32);

        let mut rgb = ImageBuffer::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = (y as usize * scene.width + x as usize) * 3;
                rgb.put_pixel(
                    x,
                    y,
                    Rgb([
                        (scene.pixels[p] * 255.0).round() as u8,
                        (scene.pixels[p + 1] * 255.0).round() as u8,
                        (scene.pixels[p + 2] * 255.0).round() as u8,
                    ]),
                );
            }
        }
        rgb.save(images_dir.join(&name))?;

        let (ids, table) = scene.panoptic_truth(vocab)?;
        let mut id_img = ImageBuffer::new(w, h);
        for y in 0..h {
            for x in 0..w {
                id_img.put_pixel(x, y, encode_id(ids[y as usize * scene.width + x as usize]));
            }
        }
        id_img.save(panoptic_dir.join(&name))?;

        let segments_info = table
            .iter()
            .map(|seg| {
                let mask: Vec<bool> = ids.iter().map(|&p| p == seg.id).collect();
                CocoSegment {
                    id: seg.id,
                    category_id: seg.category,
                    area: mask.iter().filter(|&&m| m).count() as u64,
                    bbox: pixel_bbox(&mask, scene.height, scene.width),
                    iscrowd: 0,
                }
            })
            .collect();
        images.push(CocoImage {
            id: i as u64 + 1,
            file_name: name.clone(),
            width: w,
            height: h,
        });
        annotations.push(CocoAnnotation {
            image_id: i as u64 + 1,
            file_name: name,
            segments_info,
        });
    }
    let doc = CocoPanoptic {
        images,
        annotations,
        categories: vocab
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
                isthing: c.isthing as u8,
            })
            .collect(),
    };
    std::fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&doc)?)?;
    vocab.save(&dir.join("vocab.json"))?;
    Ok(())
}

/// Rebuild scenes from a COCO-panoptic dataset. The id-map PNGs are expected
/// next to the annotation file in a `panoptic/` directory. Unknown
/// categories, id collisions and segments missing from `segments_info` are
/// rejected.
pub fn ingest_coco_panoptic(
    images_dir: &Path,
    json_path: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<Scene>> {
    let doc: CocoPanoptic = serde_json::from_slice(&std::fs::read(json_path)?)?;
    for cat in &doc.categories {
        let known = vocab.get(cat.id)?;
        if known.isthing != (cat.isthing != 0) {
            return Err(Error::Schema(format!(
                "category {} thing/stuff flag disagrees with the vocabulary",
                cat.id
            )));
        }
    }
    let panoptic_dir = json_path
        .parent()
        .ok_or_else(|| Error::Schema("annotation path has no parent directory".into()))?
        .join("panoptic");

    let image_meta: BTreeMap<u64, &CocoImage> = doc.images.iter().map(|im| (im.id, im)).collect();
    let mut annotations: Vec<&CocoAnnotation> = doc.annotations.iter().collect();
    annotations.sort_by_key(|a| a.image_id);

    let mut scenes = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let meta = image_meta
            .get(&ann.image_id)
            .ok_or_else(|| Error::Schema(format!("annotation for unknown image {}", ann.image_id)))?;
        let (h, w) = (meta.height as usize, meta.width as usize);

        let img = image::open(images_dir.join(&meta.file_name))?.into_rgb8();
        if img.width() != meta.width || img.height() != meta.height {
            return Err(Error::Schema(format!(
                "{}: image is {}x{}, annotation says {}x{}",
                meta.file_name,
                img.width(),
                img.height(),
                meta.width,
                meta.height
            )));
        }
        let mut pixels = vec![0.0; h * w * 3];
        for (x, y, px) in img.enumerate_pixels() {
            let p = (y as usize * w + x as usize) * 3;
            for c in 0..3 {
                pixels[p + c] = px.0[c] as f64 / 255.0;
            }
        }

        let id_img = image::open(panoptic_dir.join(&ann.file_name))?.into_rgb8();
        let mut ids = vec![0u32; h * w];
        for (x, y, px) in id_img.enumerate_pixels() {
            ids[y as usize * w + x as usize] = decode_id(px);
        }

        let mut seg_by_id: BTreeMap<u32, &CocoSegment> = BTreeMap::new();
        for seg in &ann.segments_info {
            if seg_by_id.insert(seg.id, seg).is_some() {
                return Err(Error::Schema(format!(
                    "{}: duplicate segment id {}",
                    ann.file_name, seg.id
                )));
            }
            vocab.get(seg.category_id)?;
        }
        for &id in ids.iter() {
            if id != 0 && !seg_by_id.contains_key(&id) {
                return Err(Error::Schema(format!(
                    "{}: segment id {id} present in the id map but missing from segments_info",
                    ann.file_name
                )));
            }
        }

        let mut semantic = vec![u32::MAX; h * w];
        for (p, &id) in ids.iter().enumerate() {
            if id != 0 {
                semantic[p] = seg_by_id[&id].category_id;
            }
        }
        if semantic.contains(&u32::MAX) {
            return Err(Error::Schema(format!(
                "{}: void pixels in ground-truth panoptic map",
                ann.file_name
            )));
        }

        let mut instances = Vec::new();
        for (&id, seg) in &seg_by_id {
            if !vocab.get(seg.category_id)?.isthing {
                continue;
            }
            let mask: Vec<bool> = ids.iter().map(|&p| p == id).collect();
            if !mask.iter().any(|&m| m) {
                return Err(Error::Schema(format!(
                    "{}: segment {id} has no pixels",
                    ann.file_name
                )));
            }
            let bb = pixel_bbox(&mask, h, w);
            let bbox = [
                (bb[0] as f64 + bb[2] as f64 / 2.0) / w as f64,
                (bb[1] as f64 + bb[3] as f64 / 2.0) / h as f64,
                bb[2] as f64 / w as f64,
                bb[3] as f64 / h as f64,
            ];
            instances.push(Instance {
                category: seg.category_id,
                mask,
                bbox,
            });
        }
        scenes.push(Scene {
            height: h,
            width: w,
            pixels,
            semantic,
            instances,
        });
    }
    Ok(scenes)
}

/// Convenience loader for a directory written by [`export_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, Vocabulary)> {
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let scenes = ingest_coco_panoptic(&dir.join("images"), &dir.join("annotations.json"), &vocab)?;
    Ok((scenes, vocab))
}
