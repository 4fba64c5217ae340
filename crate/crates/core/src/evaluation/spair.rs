//! Keypoint pairs from SPair-71k style JSON annotations.

use std::path::Path;

use serde::Deserialize;

use super::metrics::{KeypointPair, Point};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawPair {
    #[serde(default)]
    filename: Option<String>,
    #[serde(default)]
    src_imname: Option<String>,
    #[serde(default)]
    trg_imname: Option<String>,
    /// `[w, h]` or `[w, h, channels]`.
    src_imsize: Vec<u32>,
    trg_imsize: Vec<u32>,
    /// `[x1, y1, x2, y2]`.
    trg_bndbox: [f64; 4],
    src_kps: Vec<[f64; 2]>,
    trg_kps: Vec<[f64; 2]>,
}

fn size(v: &[u32], what: &str) -> Result<(u32, u32)> {
    match v {
        [w, h, ..] => Ok((*w, *h)),
        _ => Err(Error::invalid(format!("{what} needs at least width and height"))),
    }
}

/// Parses one annotation record. `fallback_key` names pairs without a filename.
pub fn parse_spair_pair(text: &str, fallback_key: &str) -> Result<KeypointPair> {
    let raw: RawPair = serde_json::from_str(text)?;
    let key = raw
        .filename
        .map(|f| f.trim_end_matches(".json").to_string())
        .or_else(|| Some(format!("{}-{}", raw.src_imname.as_ref()?, raw.trg_imname.as_ref()?)))
        .unwrap_or_else(|| fallback_key.to_string());
    let [x1, y1, x2, y2] = raw.trg_bndbox;
    let pts = |v: Vec<[f64; 2]>| v.into_iter().map(|[x, y]| (x, y)).collect::<Vec<Point>>();
    let pair = KeypointPair {
        key,
        source_size: size(&raw.src_imsize, "src_imsize")?,
        target_size: size(&raw.trg_imsize, "trg_imsize")?,
        target_bbox: (x1, y1, x2 - x1, y2 - y1),
        source_keypoints: pts(raw.src_kps),
        target_keypoints: pts(raw.trg_kps),
    };
    pair.validate()?;
    Ok(pair)
}

/// Loads every `*.json` file of a directory, sorted by file name.
pub fn load_spair_dir(dir: &Path) -> Result<Vec<KeypointPair>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("pair");
            parse_spair_pair(&text, stem)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_an_annotation_record() {
        let text = r#"{"filename": "000001-2008_000585-2008_003559:aeroplane.json",
            "src_imsize": [500, 375, 3], "trg_imsize": [500, 333, 3],
            "trg_bndbox": [10, 20, 110, 70],
            "src_kps": [[1, 2], [30, 40]], "trg_kps": [[5, 6], [70, 80]]}"#;
        let p = parse_spair_pair(text, "x").unwrap();
        assert_eq!(p.key, "000001-2008_000585-2008_003559:aeroplane");
        assert_eq!((p.source_size, p.target_size), ((500, 375), (500, 333)));
        assert_eq!(p.target_bbox, (10.0, 20.0, 100.0, 50.0));
        assert_eq!(p.target_keypoints[1], (70.0, 80.0));
    }

    #[test]
    fn misaligned_keypoints_are_rejected() {
        let text = r#"{"src_imsize": [10, 10], "trg_imsize": [10, 10], "trg_bndbox": [0, 0, 5, 5],
            "src_kps": [[1, 2]], "trg_kps": []}"#;
        assert!(parse_spair_pair(text, "x").is_err());
    }
}
