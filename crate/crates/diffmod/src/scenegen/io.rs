//! Scene directory format: `manifest.json` (config + frame list + checksum),
//! frames as binary 8-bit PGM, tracks as CSV. Round-trips are lossless.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{err_config, err_format, Result};
use crate::numerics::init::{derive_seed_index, fnv1a64};
use crate::numerics::tensor::Tensor;
use crate::scenegen::{ObjectTrack, SceneConfig, SceneSequence};

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    config: SceneConfig,
    frames: Vec<String>,
    checksum: String,
}

fn frame_to_bytes(frame: &Tensor) -> Vec<u8> {
    frame
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn tracks_to_csv(tracks: &[ObjectTrack], frames: usize) -> String {
    let mut out = String::from("frame,object_id,cx,cy,visible\n");
    for t in 0..frames {
        for tr in tracks {
            let (cx, cy) = tr.centers[t];
            out.push_str(&format!(
                "{t},{},{cx:.3},{cy:.3},{}\n",
                tr.object_id,
                u8::from(tr.visible[t])
            ));
        }
    }
    out
}

fn scene_checksum(frame_bytes: &[Vec<u8>], tracks_csv: &str) -> String {
    let mut all = Vec::new();
    for fb in frame_bytes {
        all.extend_from_slice(fb);
    }
    all.extend_from_slice(tracks_csv.as_bytes());
    format!("{:016x}", fnv1a64(&all))
}

pub fn write_scene(scene: &SceneSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let frame_bytes: Vec<Vec<u8>> = scene.frames.iter().map(frame_to_bytes).collect();
    let tracks_csv = tracks_to_csv(&scene.tracks, scene.config.frames);

    let mut frame_names = Vec::with_capacity(scene.frames.len());
    for (i, bytes) in frame_bytes.iter().enumerate() {
        let name = format!("frame_{i:04}.pgm");
        let mut w = BufWriter::new(File::create(dir.join(&name))?);
        write!(w, "P5\n{} {}\n255\n", scene.config.width, scene.config.height)?;
        w.write_all(bytes)?;
        w.flush()?;
        frame_names.push(name);
    }
    fs::write(dir.join("tracks.csv"), &tracks_csv)?;

    let manifest = SceneManifest {
        config: scene.config.clone(),
        frames: frame_names,
        checksum: scene_checksum(&frame_bytes, &tracks_csv),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| err_format!("{e}"))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn read_pgm(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    // Header: P5\n<w> <h>\n255\n
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| err_format!("{}: malformed PGM header", path.display()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| err_format!("{}: non-UTF8 PGM header", path.display()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("P5") {
        return Err(err_format!("{}: not a binary PGM", path.display()));
    }
    let w: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err_format!("{}: bad width", path.display()))?;
    let h: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err_format!("{}: bad height", path.display()))?;
    if parts.next() != Some("255") {
        return Err(err_format!("{}: expected maxval 255", path.display()));
    }
    if w != width || h != height {
        return Err(err_format!(
            "{}: dims {w}x{h} do not match config {width}x{height}",
            path.display()
        ));
    }
    let data = &bytes[header_end + 1..];
    if data.len() != w * h {
        return Err(err_format!(
            "{}: payload {} bytes, expected {}",
            path.display(),
            data.len(),
            w * h
        ));
    }
    Ok(data.to_vec())
}

pub fn read_scene(dir: &Path) -> Result<SceneSequence> {
    let manifest_path = dir.join("manifest.json");
    let manifest: SceneManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| err_format!("{}: {e}", manifest_path.display()))?,
    )
    .map_err(|e| err_format!("{}: {e}", manifest_path.display()))?;
    let cfg = manifest.config.clone();

    if manifest.frames.len() != cfg.frames {
        return Err(err_format!(
            "frame count mismatch: manifest lists {} frames, config says {}",
            manifest.frames.len(),
            cfg.frames
        ));
    }
    let mut frame_bytes = Vec::with_capacity(cfg.frames);
    for name in &manifest.frames {
        let path = dir.join(name);
        if !path.exists() {
            return Err(err_format!("frame count mismatch: missing {}", path.display()));
        }
        frame_bytes.push(read_pgm(&path, cfg.width, cfg.height)?);
    }

    let tracks_csv = fs::read_to_string(dir.join("tracks.csv"))?;
    if scene_checksum(&frame_bytes, &tracks_csv) != manifest.checksum {
        return Err(err_format!("checksum failure in {}", dir.display()));
    }

    let tracks = parse_tracks(&tracks_csv, &cfg)?;
    let frames = frame_bytes
        .into_iter()
        .map(|bytes| {
            Tensor::from_raw(
                vec![cfg.height, cfg.width],
                bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect();

    let scene = SceneSequence {
        config: cfg,
        frames,
        tracks,
    };
    scene.validate()?;
    Ok(scene)
}

fn parse_tracks(csv: &str, cfg: &SceneConfig) -> Result<Vec<ObjectTrack>> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| err_format!("empty tracks.csv"))?;
    if header.trim() != "frame,object_id,cx,cy,visible" {
        return Err(err_format!("tracks.csv: unexpected header {header:?}"));
    }
    let mut tracks: Vec<ObjectTrack> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(err_format!("tracks.csv line {}: {line:?}", lineno + 2));
        }
        let frame: usize = cols[0].parse().map_err(|_| err_format!("bad frame index"))?;
        let id: usize = cols[1].parse().map_err(|_| err_format!("bad object id"))?;
        let cx: f64 = cols[2].parse().map_err(|_| err_format!("bad cx"))?;
        let cy: f64 = cols[3].parse().map_err(|_| err_format!("bad cy"))?;
        let visible = match cols[4].trim() {
            "0" => false,
            "1" => true,
            other => return Err(err_format!("bad visible flag {other:?}")),
        };
        if visible
            && (cx < 0.0 || cy < 0.0 || cx > (cfg.width - 1) as f64 || cy > (cfg.height - 1) as f64)
        {
            return Err(err_format!(
                "tracks.csv: center ({cx},{cy}) out of bounds at frame {frame}"
            ));
        }
        while tracks.len() <= id {
            let next_id = tracks.len();
            tracks.push(ObjectTrack {
                object_id: next_id,
                centers: vec![(0.0, 0.0); cfg.frames],
                visible: vec![false; cfg.frames],
            });
        }
        if frame >= cfg.frames {
            return Err(err_format!("tracks.csv: frame {frame} out of range"));
        }
        tracks[id].centers[frame] = (cx, cy);
        tracks[id].visible[frame] = visible;
    }
    Ok(tracks)
}

/// Data split label inside a dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub base_config: SceneConfig,
    pub scenes: Vec<DatasetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub split: Split,
}

/// Generates `n_train` + `n_test` scenes with per-scene seeds derived from
/// the base seed, writes them under `out_dir`, and returns the manifest.
pub fn make_dataset(
    n_train: usize,
    n_test: usize,
    base_config: &SceneConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(err_config!("n_train and n_test must be at least 1"));
    }
    fs::create_dir_all(out_dir)?;
    let mut scenes = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let split = if i < n_train { Split::Train } else { Split::Test };
        let mut cfg = base_config.clone();
        cfg.seed = derive_seed_index(seed, i as u64);
        let scene = crate::scenegen::generate_scene(&cfg)?;
        let dir_name = format!("scene_{i:04}");
        write_scene(&scene, &out_dir.join(&dir_name))?;
        scenes.push(DatasetEntry {
            dir: dir_name,
            split,
        });
    }
    let manifest = DatasetManifest {
        base_config: base_config.clone(),
        scenes,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| err_format!("{e}"))?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a dataset manifest and resolves scene directories.
pub fn read_dataset(dir: &Path) -> Result<Vec<(PathBuf, Split)>> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| err_format!("dataset manifest: {e}"))?;
    Ok(manifest
        .scenes
        .iter()
        .map(|e| (dir.join(&e.dir), e.split))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::generate_scene;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("diffmod_scene_io").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            height: 48,
            width: 48,
            frames: 12,
            object_count: (2, 3),
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tmp("roundtrip");
        let scene = generate_scene(&small_cfg(7)).unwrap();
        write_scene(&scene, &dir).unwrap();
        let back = read_scene(&dir).unwrap();
        assert_eq!(back.config, scene.config);
        assert_eq!(back.tracks, scene.tracks);
        for (a, b) in back.frames.iter().zip(&scene.frames) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn missing_frame_reports_count_mismatch() {
        let dir = tmp("missing_frame");
        let scene = generate_scene(&small_cfg(8)).unwrap();
        write_scene(&scene, &dir).unwrap();
        fs::remove_file(dir.join("frame_0003.pgm")).unwrap();
        let err = read_scene(&dir).unwrap_err().to_string();
        assert!(err.contains("frame count mismatch"), "{err}");
    }

    #[test]
    fn corrupted_frame_fails_checksum() {
        let dir = tmp("checksum");
        let scene = generate_scene(&small_cfg(9)).unwrap();
        write_scene(&scene, &dir).unwrap();
        let path = dir.join("frame_0000.pgm");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        let err = read_scene(&dir).unwrap_err().to_string();
        assert!(err.contains("checksum failure"), "{err}");
    }

    #[test]
    fn out_of_bounds_track_is_rejected() {
        let dir = tmp("oob_track");
        let scene = generate_scene(&small_cfg(10)).unwrap();
        write_scene(&scene, &dir).unwrap();
        // Corrupt one visible row with an out-of-bounds cx, keeping the
        // checksum consistent by rewriting the manifest.
        let csv = fs::read_to_string(dir.join("tracks.csv")).unwrap();
        let mut lines: Vec<String> = csv.lines().map(String::from).collect();
        let idx = lines
            .iter()
            .position(|l| l.ends_with(",1"))
            .expect("some visible row");
        let cols: Vec<&str> = lines[idx].split(',').collect();
        lines[idx] = format!("{},{},9999.000,{},{}", cols[0], cols[1], cols[3], cols[4]);
        let new_csv = lines.join("\n") + "\n";
        fs::write(dir.join("tracks.csv"), &new_csv).unwrap();
        let manifest_str = fs::read_to_string(dir.join("manifest.json")).unwrap();
        let mut manifest: SceneManifest = serde_json::from_str(&manifest_str).unwrap();
        let frame_bytes: Vec<Vec<u8>> = scene.frames.iter().map(frame_to_bytes).collect();
        manifest.checksum = scene_checksum(&frame_bytes, &new_csv);
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )
        .unwrap();
        let err = read_scene(&dir).unwrap_err().to_string();
        assert!(err.contains("out of bounds"), "{err}");
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let dir_a = tmp("dataset_a");
        let dir_b = tmp("dataset_b");
        let cfg = small_cfg(0);
        let m1 = make_dataset(5, 2, &cfg, 7, &dir_a).unwrap();
        let m2 = make_dataset(5, 2, &cfg, 7, &dir_b).unwrap();
        assert_eq!(m1.scenes.len(), 7);
        assert_eq!(
            m1.scenes.iter().filter(|e| e.split == Split::Train).count(),
            5
        );
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
        // Disjoint per-scene seeds: all scene directories differ.
        let s0 = fs::read(dir_a.join("scene_0000/frame_0000.pgm")).unwrap();
        let s1 = fs::read(dir_a.join("scene_0001/frame_0000.pgm")).unwrap();
        assert_ne!(s0, s1);
    }

    #[test]
    fn zero_test_split_is_config_error() {
        let dir = tmp("zero_test");
        assert!(make_dataset(4, 0, &small_cfg(0), 7, &dir).is_err());
    }
}
