//! Dataset directories: one numbered subdirectory per stereo pair.
//!
//! ```text
//! 0000/left.png  0000/right.png  0000/valid.png  0000/disp.pfm  0000/meta.txt
//! ```
//!
//! `disp.png` (16-bit, KITTI scaling) may replace `disp.pfm`; its zero
//! pixels then mark missing ground truth and `valid.png` becomes optional.

use std::fs;
use std::path::{Path, PathBuf};

use super::png::{
    read_disparity_pfm, read_kitti_disparity, read_mask_png, read_rgb_png, write_disparity_pfm,
    write_mask_png, write_rgb_png,
};
use crate::error::{Error, Result};
use crate::stereo::StereoSample;

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("{index:04}"))
}

pub fn save_sample(dir: &Path, s: &StereoSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rgb_png(&dir.join("left.png"), &s.left)?;
    write_rgb_png(&dir.join("right.png"), &s.right)?;
    write_mask_png(&dir.join("valid.png"), &s.gt_valid)?;
    write_disparity_pfm(&dir.join("disp.pfm"), &s.gt_disparity)?;
    let mut meta = format!("d_max={}\n", s.d_max);
    if let Some(seed) = s.seed {
        meta.push_str(&format!("seed={seed}\n"));
    }
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

fn parse_meta(text: &str) -> Result<(usize, Option<u64>)> {
    let (mut d_max, mut seed) = (None, None);
    let mut offset = 0;
    for line in text.lines() {
        let at = offset;
        offset += line.len() + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Error::Parse { offset: at, message: m };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("meta line `{line}` is not key=value")))?;
        match k.trim() {
            "d_max" => d_max = Some(v.trim().parse().map_err(|_| bad(format!("bad d_max `{v}`")))?),
            "seed" => seed = Some(v.trim().parse().map_err(|_| bad(format!("bad seed `{v}`")))?),
            other => return Err(bad(format!("unknown meta key `{other}`"))),
        }
    }
    let d_max = d_max.ok_or_else(|| Error::invalid("meta.txt lacks d_max"))?;
    Ok((d_max, seed))
}

pub fn load_sample(dir: &Path) -> Result<StereoSample> {
    let (d_max, seed) = parse_meta(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let left = read_rgb_png(&dir.join("left.png"))?;
    let right = read_rgb_png(&dir.join("right.png"))?;
    let (gt_disparity, gt_valid) = if dir.join("disp.pfm").exists() {
        let d = read_disparity_pfm(&dir.join("disp.pfm"))?;
        let v = read_mask_png(&dir.join("valid.png"))?;
        (d, v)
    } else {
        let (d, mut v) = read_kitti_disparity(&dir.join("disp.png"))?;
        if dir.join("valid.png").exists() {
            let m = read_mask_png(&dir.join("valid.png"))?;
            for (a, b) in v.data.iter_mut().zip(m.data) {
                *a &= b;
            }
        }
        (d, v)
    };
    let s = StereoSample {
        left,
        right,
        gt_disparity,
        gt_valid,
        d_max,
        seed,
    };
    s.validate()?;
    Ok(s)
}

/// Numbered sample directories under `root`, in name order.
pub fn dataset_entries(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(root)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type()?.is_dir() && !name.is_empty() && name.bytes().all(|b| b.is_ascii_digit()) {
            out.push((name, e.path()));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::invalid(format!("no samples under {}", root.display())));
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Vec<(String, StereoSample)>> {
    dataset_entries(root)?
        .into_iter()
        .map(|(n, p)| load_sample(&p).map(|s| (n, s)))
        .collect()
}
