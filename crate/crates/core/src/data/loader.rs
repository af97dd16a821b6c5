use std::path::{Path, PathBuf};

use super::pnm::{read_pnm, write_pnm};
use super::{Colorspace, Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luminance weights for RGB → gray.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone)]
pub struct LoadedDir {
    pub dataset: Dataset,
    /// Files that could not be decoded (unsupported format or corrupt).
    pub skipped: Vec<PathBuf>,
}

/// Converts an `H×W×C` image to the requested colorspace: luminance for
/// color → gray, channel replication for gray → color.
pub fn to_colorspace(image: &Tensor<f32>, target: Colorspace) -> Result<Tensor<f32>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::InvalidShape { shape: image.shape().to_vec(), reason: "expected H×W×C image".into() });
    };
    let out_c = target.channels();
    match (c, out_c) {
        (a, b) if a == b => Ok(image.clone()),
        (3, 1) => {
            let data = image
                .data()
                .chunks_exact(3)
                .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                .collect();
            Tensor::new(&[h, w, 1], data)
        }
        (1, 3) => Tensor::new(&[h, w, 3], image.data().iter().flat_map(|&v| [v, v, v]).collect()),
        _ => Err(Error::InvalidShape { shape: image.shape().to_vec(), reason: "images must have 1 or 3 channels".into() }),
    }
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::InvalidShape { shape: image.shape().to_vec(), reason: "expected H×W×C image".into() });
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape { shape: vec![out_h, out_w], reason: "target size must be positive".into() });
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    // Source coordinate of each destination index, split into the lower
    // neighbour and the weight of the upper one.
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (x - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = image.data();
    let at = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch];
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let path = e?.path();
        let hidden = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if !hidden {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/<image>` into a dataset. Classes are the
/// subdirectories in lexicographic order; files are read in name order.
/// Files that fail to decode (including PNG, which is not supported) are
/// skipped and reported.
pub fn load_image_dir(root: &Path, colorspace: Colorspace, size: (usize, usize)) -> Result<LoadedDir> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let before = samples.len();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match read_pnm(&file) {
                Ok(img) => {
                    let image = resize_bilinear(&to_colorspace(&img.into_tensor(), colorspace)?, size.0, size.1)?;
                    let id = file.strip_prefix(root).unwrap_or(&file).to_string_lossy().into_owned();
                    samples.push(Sample { image, label, source_id: id });
                }
                Err(Error::Decode { path, reason }) => {
                    log::warn!("skipping {}: {reason}", path.display());
                    skipped.push(path);
                }
                Err(e) => return Err(e),
            }
        }
        if samples.len() == before {
            return Err(Error::Dataset(format!("class directory {} has no readable images", dir.display())));
        }
        class_names.push(name);
    }
    Ok(LoadedDir { dataset: Dataset::new(samples, class_names, colorspace)?, skipped })
}

/// Writes a dataset as `root/<class>/<index>.pgm|ppm`, the layout
/// [`load_image_dir`] reads.
pub fn save_image_dir(dataset: &Dataset, root: &Path) -> Result<()> {
    let ext = match dataset.colorspace() {
        Colorspace::Gray => "pgm",
        Colorspace::Color => "ppm",
    };
    for name in dataset.class_names() {
        std::fs::create_dir_all(root.join(name))?;
    }
    for (i, s) in dataset.samples().iter().enumerate() {
        let path = root.join(&dataset.class_names()[s.label]).join(format!("{i:05}.{ext}"));
        write_pnm(&path, &s.image)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_pnm;

    fn write(path: &Path, bytes: &[u8]) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, bytes).unwrap();
    }

    fn pgm(w: usize, h: usize, v: u8) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend(std::iter::repeat_n(v, w * h));
        b
    }

    #[test]
    fn loads_classes_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write(&dir.path().join(format!("b_lung/{i}.pgm")), &pgm(4, 4, 255));
        }
        for i in 0..2 {
            write(&dir.path().join(format!("a_bone/{i}.pgm")), &pgm(6, 6, 0));
        }
        let loaded = load_image_dir(dir.path(), Colorspace::Gray, (4, 4)).unwrap();
        let d = loaded.dataset;
        assert_eq!(d.len(), 5);
        assert_eq!(d.class_names(), &["a_bone".to_string(), "b_lung".to_string()]);
        assert_eq!(d.class_counts(), vec![2, 3]);
        let white = d.samples().iter().find(|s| s.label == 1).unwrap();
        assert!(white.image.data().iter().all(|&v| v == 1.0));
        assert!(loaded.skipped.is_empty());
    }

    #[test]
    fn red_ppm_as_gray_is_luma() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = b"P6\n2 2\n255\n".to_vec();
        b.extend([255u8, 0, 0].repeat(4));
        write(&dir.path().join("red/x.ppm"), &b);
        let d = load_image_dir(dir.path(), Colorspace::Gray, (2, 2)).unwrap().dataset;
        for &v in d.samples()[0].image.data() {
            assert!((v - 0.299).abs() < 1e-6);
        }
        let c = load_image_dir(dir.path(), Colorspace::Color, (2, 2)).unwrap().dataset;
        assert_eq!(c.samples()[0].image.data()[..3], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn undecodable_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("a/ok.pgm"), &pgm(2, 2, 10));
        write(&dir.path().join("a/broken.pgm"), b"P5\n9 9\n255\n");
        write(&dir.path().join("a/scan.png"), b"\x89PNG\r\n\x1a\n");
        let loaded = load_image_dir(dir.path(), Colorspace::Gray, (2, 2)).unwrap();
        assert_eq!(loaded.dataset.len(), 1);
        assert_eq!(loaded.skipped.len(), 2);
    }

    #[test]
    fn empty_layouts_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_dir(dir.path(), Colorspace::Gray, (2, 2)).is_err());
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(load_image_dir(dir.path(), Colorspace::Gray, (2, 2)).is_err());
        assert!(load_image_dir(&dir.path().join("missing"), Colorspace::Gray, (2, 2)).is_err());
    }

    #[test]
    fn resize_examples() {
        let img = Tensor::from_fn(&[2, 2, 1], |i| [0.0, 1.0, 0.0, 1.0][i]);
        let up = resize_bilinear(&img, 4, 4).unwrap();
        // Columns at x = -0.25, 0.25, 0.75, 1.25 → clamped 0, 0.25, 0.75, 1.
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        let flat = Tensor::full(&[5, 7, 3], 0.4f32);
        let r = resize_bilinear(&flat, 3, 9).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert_eq!(resize_bilinear(&flat, 5, 7).unwrap(), flat);
        // 4 → 2 averages neighbouring pairs.
        let row = Tensor::from_fn(&[1, 4, 1], |i| i as f32 / 4.0);
        assert_eq!(resize_bilinear(&row, 1, 2).unwrap().data(), &[0.125, 0.625]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::Rng::new(4);
        let samples = (0..4)
            .map(|i| Sample {
                image: Tensor::from_fn(&[5, 5, 3], |_| rng.uniform() as f32),
                label: i % 2,
                source_id: i.to_string(),
            })
            .collect();
        let d = Dataset::new(samples, vec!["x".into(), "y".into()], Colorspace::Color).unwrap();
        save_image_dir(&d, dir.path()).unwrap();
        let back = load_image_dir(dir.path(), Colorspace::Color, (5, 5)).unwrap().dataset;
        assert_eq!(back.class_counts(), vec![2, 2]);
        for s in back.samples() {
            let idx: usize = s.source_id.rsplit('/').next().unwrap()[..5].parse().unwrap();
            let orig = &d.samples()[idx];
            assert_eq!(orig.label, s.label);
            for (a, b) in orig.image.data().iter().zip(s.image.data()) {
                assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
        assert!(encode_pnm(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
