//! Directory ingestion: `root/<class_name>/<image>.png` plus a `<class_name>,<split>` file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{check_disjoint, ImageSample, LabeledDataset, Split};

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

fn load_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Load(msg.into()))
}

/// Parses `<class_name>,<train|val|test>` lines. Blank lines and `#` comments are skipped.
pub fn parse_split_file(text: &str) -> Result<BTreeMap<String, Split>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((name, split)) = line.rsplit_once(',') else {
            return load_err(format!("split file line {}: expected <class>,<split>", lineno + 1));
        };
        let split = match split.trim() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => {
                return load_err(format!(
                    "split file line {}: unknown split {other:?}",
                    lineno + 1
                ))
            }
        };
        let name = name.trim().to_string();
        if out.insert(name.clone(), split).is_some() {
            return load_err(format!("class {name:?} listed twice in split file"));
        }
    }
    Ok(out)
}

fn decode(path: &Path, side: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize != side || img.height() as usize != side {
        image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
    } else {
        img
    };
    let mut data = vec![0.0f32; 3 * side * side];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * side + y as usize) * side + x as usize] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, side, side], data)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads the three splits. Images are decoded to RGB, scaled to [0,1] and
/// bilinearly resized to `side×side`. Class ids follow sorted class names;
/// sample ids follow (class name, file name) order.
pub fn load_dataset(root: &Path, split_file: &Path, side: usize) -> Result<DatasetSplits> {
    let text = std::fs::read_to_string(split_file).map_err(|e| Error::io(split_file, e))?;
    let splits = parse_split_file(&text)?;
    if splits.is_empty() {
        return load_err(format!("split file {} lists no classes", split_file.display()));
    }
    let mut per_split: BTreeMap<Split, (Vec<ImageSample>, BTreeMap<usize, String>)> =
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .map(|s| (s, Default::default()))
            .collect();
    let mut next_id = 0u64;
    for (class_id, (name, split)) in splits.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return load_err(format!(
                "class {name:?} from the split file has no directory {}",
                dir.display()
            ));
        }
        let files = png_files(&dir)?;
        if files.is_empty() {
            return load_err(format!("class {name:?} has no PNG images"));
        }
        let (samples, names) = per_split.get_mut(split).expect("all splits present");
        names.insert(class_id, name.clone());
        for f in files {
            samples.push(ImageSample {
                id: next_id,
                pixels: Arc::new(decode(&f, side)?),
                label: class_id,
            });
            next_id += 1;
        }
    }
    let mut build = |s: Split| {
        let (samples, names) = per_split.remove(&s).expect("split present");
        LabeledDataset::new(s, samples, names)
    };
    let out = DatasetSplits {
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: build(Split::Test)?,
    };
    check_disjoint(&out.train, &out.test)?;
    Ok(out)
}

/// Writes datasets as `root/<class_name>/<id>.png` plus `root/splits.txt`.
pub fn export_dataset(datasets: &[&LabeledDataset], root: &Path) -> Result<PathBuf> {
    let mut split_lines = String::new();
    for ds in datasets {
        for (&c, name) in ds.class_names() {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            split_lines.push_str(&format!("{name},{}\n", ds.role()));
            for &i in ds.class_members(c) {
                let s = &ds.samples()[i];
                let path = dir.join(format!("{:06}.png", s.id));
                save_png(&s.pixels, &path)?;
            }
        }
    }
    let split_path = root.join("splits.txt");
    std::fs::write(&split_path, split_lines).map_err(|e| Error::io(&split_path, e))?;
    Ok(split_path)
}

/// Saves a 1- or 3-channel C×H×W tensor in [0,1] as an 8-bit PNG.
pub fn save_png(pixels: &Tensor, path: &Path) -> Result<()> {
    let s = pixels.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let src = if c == 3 { ch } else { 0 };
            let v = pixels.data()[(src * h + y as usize) * w + x as usize];
            px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path)
        .map_err(|e| Error::Load(format!("cannot write {}: {e}", path.display())))
}
