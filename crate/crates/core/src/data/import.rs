//! One-shot converters from public dataset layouts to interchange records.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{GazeAnnotation, Split};
use crate::error::{GazeError, Result};
use crate::prompting::HeadBBox;
use crate::targets::GazePoint;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GazeError {
    GazeError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn field(record: &csv::StringRecord, k: usize, path: &Path, line: usize) -> Result<f64> {
    record
        .get(k)
        .ok_or_else(|| parse_err(path, line, format!("missing column {k}")))?
        .trim()
        .parse::<f64>()
        .map_err(|e| parse_err(path, line, format!("column {k}: {e}")))
}

fn pixel_box(x1: f64, y1: f64, x2: f64, y2: f64, w: f64, h: f64) -> Result<HeadBBox> {
    let cx = |v: f64| (v / w).clamp(0.0, 1.0);
    let cy = |v: f64| (v / h).clamp(0.0, 1.0);
    HeadBBox::new(cx(x1.min(x2)), cy(y1.min(y2)), cx(x1.max(x2)), cy(y1.max(y2)))
}

fn dims(root: &Path, rel: &str) -> Result<(f64, f64)> {
    let (w, h) = ::image::image_dimensions(root.join(rel))?;
    Ok((w as f64, h as f64))
}

/// Converts a GazeFollow annotation text file (comma-separated, no header).
///
/// Columns used: 0 `path`, 8–9 `gaze_x, gaze_y` (normalized), 10–13 head box
/// in pixels, and for the train split column 14 `inout` (positive means in
/// frame). Test rows sharing `path` and eye position are merged into one
/// record with all their gaze points in file order. Image sizes are read from
/// `image_root`.
pub fn import_gazefollow(csv_path: &Path, image_root: &Path, split: Split) -> Result<Vec<GazeAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(csv_path)
        .map_err(|e| parse_err(csv_path, 0, e.to_string()))?;
    let mut out: Vec<GazeAnnotation> = Vec::new();
    let mut index: HashMap<(String, u64, u64), usize> = HashMap::new();
    let mut sizes: HashMap<String, (f64, f64)> = HashMap::new();
    for (k, row) in reader.records().enumerate() {
        let line = k + 1;
        let row = row.map_err(|e| parse_err(csv_path, line, e.to_string()))?;
        let rel = row.get(0).ok_or_else(|| parse_err(csv_path, line, "missing path"))?.trim().to_string();
        let get = |c: usize| field(&row, c, csv_path, line);
        let (eye_x, eye_y) = (get(6)?, get(7)?);
        let (gx, gy) = (get(8)?, get(9)?);
        let (w, h) = match sizes.get(&rel) {
            Some(&s) => s,
            None => {
                let s = dims(image_root, &rel)?;
                sizes.insert(rel.clone(), s);
                s
            }
        };
        let bbox = pixel_box(get(10)?, get(11)?, get(12)?, get(13)?, w, h).map_err(|e| parse_err(csv_path, line, e.to_string()))?;
        let point_ok = (0.0..=1.0).contains(&gx) && (0.0..=1.0).contains(&gy);
        let in_frame = match split {
            Split::Train => point_ok && get(14).map(|v| v > 0.0).unwrap_or(true),
            Split::Test => point_ok,
        };
        let point = GazePoint { x: gx, y: gy };
        match split {
            Split::Train => out.push(GazeAnnotation {
                image_id: rel,
                bbox,
                gaze_points: if in_frame { vec![point] } else { Vec::new() },
                in_frame,
                split,
            }),
            Split::Test => {
                let key = (rel.clone(), eye_x.to_bits(), eye_y.to_bits());
                match index.get(&key) {
                    Some(&i) if in_frame => {
                        out[i].gaze_points.push(point);
                        out[i].in_frame = true;
                    }
                    Some(_) => {}
                    None => {
                        index.insert(key, out.len());
                        out.push(GazeAnnotation {
                            image_id: rel,
                            bbox,
                            gaze_points: if in_frame { vec![point] } else { Vec::new() },
                            in_frame,
                            split,
                        });
                    }
                }
            }
        }
    }
    for a in &out {
        a.validate()?;
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Converts a VideoAttentionTarget tree.
///
/// Expects `root/annotations/{train,test}/<show>/<clip>/<person>.txt` with
/// lines `frame,xmin,ymin,xmax,ymax,gaze_x,gaze_y` in pixels (`-1,-1` gaze
/// means out of frame), and frames at `root/images/<show>/<clip>/<frame>`.
pub fn import_video_attention_target(root: &Path, split: Split) -> Result<Vec<GazeAnnotation>> {
    let split_dir = root
        .join("annotations")
        .join(if split == Split::Train { "train" } else { "test" });
    let mut out = Vec::new();
    for show in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
        for clip in sorted_entries(&show)?.into_iter().filter(|p| p.is_dir()) {
            let show_name = show.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let clip_name = clip.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let mut size: Option<(f64, f64)> = None;
            for file in sorted_entries(&clip)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            {
                let text = std::fs::read_to_string(&file)?;
                for (k, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                    if cols.len() < 7 {
                        return Err(parse_err(&file, k + 1, format!("expected 7 columns, got {}", cols.len())));
                    }
                    let num = |c: usize| {
                        cols[c]
                            .parse::<f64>()
                            .map_err(|e| parse_err(&file, k + 1, format!("column {c}: {e}")))
                    };
                    let rel = format!("images/{show_name}/{clip_name}/{}", cols[0]);
                    let (w, h) = match size {
                        Some(s) => s,
                        None => {
                            let s = dims(root, &rel)?;
                            size = Some(s);
                            s
                        }
                    };
                    let bbox = pixel_box(num(1)?, num(2)?, num(3)?, num(4)?, w, h)
                        .map_err(|e| parse_err(&file, k + 1, e.to_string()))?;
                    let (gx, gy) = (num(5)?, num(6)?);
                    let in_frame = gx >= 0.0 && gy >= 0.0;
                    out.push(GazeAnnotation {
                        image_id: rel,
                        bbox,
                        gaze_points: if in_frame {
                            vec![GazePoint {
                                x: (gx / w).clamp(0.0, 1.0),
                                y: (gy / h).clamp(0.0, 1.0),
                            }]
                        } else {
                            Vec::new()
                        },
                        in_frame,
                        split,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::RgbFrame;
    use super::*;

    #[test]
    fn gazefollow_train_and_test_layouts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("train")).unwrap();
        RgbFrame::filled(100, 200, [0.5; 3])
            .save_png(&dir.path().join("train/a.png"))
            .unwrap();
        let train = dir.path().join("train.txt");
        std::fs::write(
            &train,
            "train/a.png,0,0,0,10,10,0.2,0.2,0.75,0.5,20,10,60,50,1,src,meta\n\
             train/a.png,1,0,0,10,10,0.5,0.5,-1,-1,100,10,140,50,0,src,meta\n",
        )
        .unwrap();
        let anns = import_gazefollow(&train, dir.path(), Split::Train).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].bbox, HeadBBox::new(0.1, 0.1, 0.3, 0.5).unwrap());
        assert_eq!(anns[0].gaze_points, vec![GazePoint { x: 0.75, y: 0.5 }]);
        assert!(!anns[1].in_frame && anns[1].gaze_points.is_empty());

        let test = dir.path().join("test.txt");
        let rows: String = (0..10)
            .map(|k| format!("train/a.png,0,0,0,10,10,0.2,0.2,{},{},20,10,60,50,src,meta\n", 0.05 * k as f64 + 0.1, 0.5))
            .collect();
        std::fs::write(&test, rows).unwrap();
        let anns = import_gazefollow(&test, dir.path(), Split::Test).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].gaze_points.len(), 10);
        assert_eq!(anns[0].gaze_points[3].x, 0.05 * 3.0 + 0.1);
    }

    #[test]
    fn video_attention_target_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images/show/clip1")).unwrap();
        std::fs::create_dir_all(root.join("annotations/test/show/clip1")).unwrap();
        RgbFrame::filled(50, 100, [0.5; 3])
            .save_png(&root.join("images/show/clip1/0001.png"))
            .unwrap();
        std::fs::write(
            root.join("annotations/test/show/clip1/s01.txt"),
            "0001.png,10,5,30,25,50,40\n0001.png,10,5,30,25,-1,-1\n",
        )
        .unwrap();
        let anns = import_video_attention_target(root, Split::Test).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].image_id, "images/show/clip1/0001.png");
        assert_eq!(anns[0].gaze_points, vec![GazePoint { x: 0.5, y: 0.8 }]);
        assert!(!anns[1].in_frame);
        for a in anns {
            a.validate().unwrap();
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "a.png,0,0,0,10,10,x,0.2\n").unwrap();
        assert!(matches!(
            import_gazefollow(&path, dir.path(), Split::Train),
            Err(GazeError::Parse { line: 1, .. })
        ));
    }
}
