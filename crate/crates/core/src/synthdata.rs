//! Procedural corpus: one textured product rendered many times, with
//! pixel-exact defect masks.
//!
//! All randomness derives from (seed, role, index) labels, so regeneration
//! with the same seed is byte-identical. Normal renders share the product's
//! global structure and differ only in low-frequency jitter; defects are
//! stamped on top and the mask records exactly the stamped pixels.

use crate::config::DataConfig;
use crate::error::{Result, SeasError};
use crate::imagedata::{ImageF, MaskImage};
use crate::util::rng_for;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Global description of the rendered product. Fixed per corpus seed; every
/// image of the corpus is a jittered render of this structure.
#[derive(Clone, Debug)]
pub struct ProductSpec {
    pub seed: u64,
    pub size: usize,
    stripe_period: f64,
    stripe_angle: f64,
    cell_size: usize,
    base: [f64; 3],
    accent: [f64; 3],
}

impl ProductSpec {
    pub fn derive(seed: u64, size: usize) -> Self {
        let mut rng = rng_for(seed, "product-spec");
        let stripe_period = rng.gen_range(6.0..11.0) * size as f64 / 64.0;
        let stripe_angle = [0.0f64, 30.0, 60.0, 90.0][rng.gen_range(0..4)].to_radians();
        let cell_size = rng.gen_range(10..16) * size / 64;
        // keep the palette inside [0.30, 0.80] so defect colors stay distinct
        let base: [f64; 3] = [
            rng.gen_range(0.35..0.55),
            rng.gen_range(0.35..0.55),
            rng.gen_range(0.35..0.55),
        ];
        let accent = [
            (base[0] + rng.gen_range(0.15..0.25)).min(0.80),
            (base[1] + rng.gen_range(0.15..0.25)).min(0.80),
            (base[2] + rng.gen_range(0.15..0.25)).min(0.80),
        ];
        ProductSpec {
            seed,
            size,
            stripe_period,
            stripe_angle,
            cell_size: cell_size.max(4),
            base,
            accent,
        }
    }

    /// Render the shared structure with per-image jitter drawn from `rng`.
    fn render(&self, rng: &mut ChaCha8Rng) -> ImageF {
        let s = self.size;
        let mut img = ImageF::new(3, s, s);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        // low-frequency brightness field on a 4x4 lattice
        let lattice: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let (ca, sa) = (self.stripe_angle.cos(), self.stripe_angle.sin());
        for y in 0..s {
            for x in 0..s {
                let u = x as f64 * ca + y as f64 * sa;
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * u / self.stripe_period + phase).sin();
                // bilinear sample of the jitter lattice
                let fy = y as f64 / s as f64 * 3.0;
                let fx = x as f64 / s as f64 * 3.0;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
                let j = lattice[y0 * 4 + x0] * (1.0 - dy) * (1.0 - dx)
                    + lattice[y0 * 4 + x1] * (1.0 - dy) * dx
                    + lattice[y1 * 4 + x0] * dy * (1.0 - dx)
                    + lattice[y1 * 4 + x1] * dy * dx;
                let grid = if y % self.cell_size == 0 || x % self.cell_size == 0 { 0.88 } else { 1.0 };
                for ch in 0..3 {
                    let v = (self.base[ch] + (self.accent[ch] - self.base[ch]) * t) * grid + j;
                    img.set(ch, y, x, v);
                }
            }
        }
        img.quantize();
        img
    }

    pub fn generate_normal(&self, index: usize) -> ImageF {
        let mut rng = rng_for(self.seed, &format!("normal-{}", index));
        self.render(&mut rng)
    }

    /// Render plus one stamped defect of the named family. The mask is set
    /// exactly on the stamped pixels.
    pub fn generate_abnormal(&self, family: &str, index: usize) -> Result<(ImageF, MaskImage)> {
        let mut rng = rng_for(self.seed, &format!("abnormal-{}-{}", family, index));
        let mut img = self.render(&mut rng);
        let mut mask = MaskImage::zeros(self.size, self.size);
        match family {
            "scratch" => self.stamp_scratch(&mut rng, &mut img, &mut mask),
            "blob" => self.stamp_blob(&mut rng, &mut img, &mut mask),
            "hole" => self.stamp_hole(&mut rng, &mut img, &mut mask),
            other => {
                return Err(SeasError::Config(format!("unknown defect family '{}'", other)));
            }
        }
        img.quantize();
        if mask.count_ones() == 0 {
            return Err(SeasError::Data(format!("empty defect stamp for {} #{}", family, index)));
        }
        Ok((img, mask))
    }

    fn stamp_pixel(img: &mut ImageF, mask: &mut MaskImage, y: usize, x: usize, color: [f64; 3]) {
        for ch in 0..3 {
            img.set(ch, y, x, color[ch]);
        }
        mask.set(y, x, 1);
    }

    /// Thin dark polyline with two segments.
    fn stamp_scratch(&self, rng: &mut ChaCha8Rng, img: &mut ImageF, mask: &mut MaskImage) {
        let s = self.size as f64;
        let margin = (self.size / 8).max(2) as f64;
        let color = [0.04, 0.04, 0.06];
        let mut px = rng.gen_range(margin..s - margin);
        let mut py = rng.gen_range(margin..s - margin);
        let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let thick: f64 = if rng.gen_bool(0.5) { 0.6 } else { 1.1 };
        for _seg in 0..2 {
            let len = rng.gen_range(s * 0.2..s * 0.4);
            let steps = (len * 2.0) as usize;
            for k in 0..steps {
                let cx = px + angle.cos() * len * k as f64 / steps as f64;
                let cy = py + angle.sin() * len * k as f64 / steps as f64;
                let r = thick.ceil() as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (cy as isize + dy, cx as isize + dx);
                        if yy < 0 || xx < 0 || yy >= self.size as isize || xx >= self.size as isize {
                            continue;
                        }
                        let d2 = (yy as f64 - cy).powi(2) + (xx as f64 - cx).powi(2);
                        if d2 <= thick * thick {
                            Self::stamp_pixel(img, mask, yy as usize, xx as usize, color);
                        }
                    }
                }
            }
            px += angle.cos() * len;
            py += angle.sin() * len;
            angle += rng.gen_range(-0.9..0.9);
            px = px.clamp(margin, s - margin);
            py = py.clamp(margin, s - margin);
        }
    }

    /// Filled ellipse in a saturated off-palette color.
    fn stamp_blob(&self, rng: &mut ChaCha8Rng, img: &mut ImageF, mask: &mut MaskImage) {
        let s = self.size as f64;
        let color = [0.85, 0.10, 0.12];
        let (ry, rx) = (
            rng.gen_range(s * 0.05..s * 0.11).max(1.5),
            rng.gen_range(s * 0.05..s * 0.11).max(1.5),
        );
        let cy = rng.gen_range(ry + 1.0..s - ry - 1.0);
        let cx = rng.gen_range(rx + 1.0..s - rx - 1.0);
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (cr, sr) = (rot.cos(), rot.sin());
        for y in 0..self.size {
            for x in 0..self.size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = dx * cr + dy * sr;
                let v = -dx * sr + dy * cr;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    Self::stamp_pixel(img, mask, y, x, color);
                }
            }
        }
    }

    /// Dark disk with a slightly lighter rim ring, both inside the mask.
    fn stamp_hole(&self, rng: &mut ChaCha8Rng, img: &mut ImageF, mask: &mut MaskImage) {
        let s = self.size as f64;
        let r = rng.gen_range(s * 0.05..s * 0.10).max(2.0);
        let cy = rng.gen_range(r + 1.0..s - r - 1.0);
        let cx = rng.gen_range(r + 1.0..s - r - 1.0);
        for y in 0..self.size {
            for x in 0..self.size {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d <= r {
                    let c = if d > r * 0.7 { [0.16, 0.14, 0.13] } else { [0.03, 0.03, 0.03] };
                    Self::stamp_pixel(img, mask, y, x, c);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSample {
    pub index: usize,
    pub image: ImageF,
    pub mask: Option<MaskImage>,
    /// 0 = normal, otherwise 1-based anomaly type.
    pub anomaly_type: usize,
    pub holdout: bool,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub anomaly_types: Vec<String>,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn normals(&self) -> Vec<&CorpusSample> {
        self.samples.iter().filter(|s| s.anomaly_type == 0 && !s.holdout).collect()
    }

    pub fn holdout_normals(&self) -> Vec<&CorpusSample> {
        self.samples.iter().filter(|s| s.anomaly_type == 0 && s.holdout).collect()
    }

    pub fn abnormals(&self) -> Vec<&CorpusSample> {
        self.samples.iter().filter(|s| s.anomaly_type > 0).collect()
    }

    pub fn abnormals_of_type(&self, n: usize) -> Vec<&CorpusSample> {
        self.samples.iter().filter(|s| s.anomaly_type == n).collect()
    }

    pub fn n_types(&self) -> usize {
        self.anomaly_types.len()
    }
}

/// Build the in-memory corpus: normals, per-type abnormals, held-out normals.
pub fn make_corpus(data: &DataConfig, image_size: usize, seed: u64) -> Result<Corpus> {
    let spec = ProductSpec::derive(seed, image_size);
    let mut samples = Vec::new();
    let mut index = 0;
    for i in 0..data.normal_count {
        samples.push(CorpusSample {
            index,
            image: spec.generate_normal(i),
            mask: None,
            anomaly_type: 0,
            holdout: false,
        });
        index += 1;
    }
    for (ti, family) in data.anomaly_types.iter().enumerate() {
        for i in 0..data.abnormal_per_type {
            let (image, mask) = spec.generate_abnormal(family, i)?;
            samples.push(CorpusSample {
                index,
                image,
                mask: Some(mask),
                anomaly_type: ti + 1,
                holdout: false,
            });
            index += 1;
        }
    }
    for i in 0..data.holdout_normal {
        samples.push(CorpusSample {
            index,
            image: spec.generate_normal(data.normal_count + i),
            mask: None,
            anomaly_type: 0,
            holdout: true,
        });
        index += 1;
    }
    Ok(Corpus {
        anomaly_types: data.anomaly_types.clone(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    index: usize,
    image: String,
    mask: Option<String>,
    anomaly_type: usize,
    anomaly_name: Option<String>,
    holdout: bool,
}

/// Write images/, masks/ and manifest.jsonl under out_dir.
pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut manifest = std::fs::File::create(out_dir.join("manifest.jsonl"))?;
    for s in &corpus.samples {
        let img_rel = format!("images/{:05}.png", s.index);
        s.image.write_png(&out_dir.join(&img_rel))?;
        let mask_rel = if let Some(m) = &s.mask {
            let rel = format!("masks/{:05}.png", s.index);
            m.write_png(&out_dir.join(&rel))?;
            Some(rel)
        } else {
            None
        };
        let line = ManifestLine {
            index: s.index,
            image: img_rel,
            mask: mask_rel,
            anomaly_type: s.anomaly_type,
            anomaly_name: if s.anomaly_type > 0 {
                Some(corpus.anomaly_types[s.anomaly_type - 1].clone())
            } else {
                None
            },
            holdout: s.holdout,
        };
        writeln!(manifest, "{}", serde_json::to_string(&line).unwrap())?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let f = std::fs::File::open(dir.join("manifest.jsonl")).map_err(|_| {
        SeasError::MissingArtifact(format!("{}/manifest.jsonl", dir.display()))
    })?;
    let reader = std::io::BufReader::new(f);
    let mut samples = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| SeasError::Parse {
            line: ln + 1,
            msg: e.to_string(),
        })?;
        let image = ImageF::read_png(&dir.join(&m.image))?;
        let mask = match &m.mask {
            Some(rel) => Some(MaskImage::read_png(&dir.join(rel))?),
            None => None,
        };
        if m.anomaly_type > 0 {
            let name = m.anomaly_name.clone().ok_or_else(|| SeasError::Parse {
                line: ln + 1,
                msg: "abnormal sample without anomaly_name".into(),
            })?;
            while names.len() < m.anomaly_type {
                names.push(String::new());
            }
            names[m.anomaly_type - 1] = name;
            if mask.is_none() {
                return Err(SeasError::Parse {
                    line: ln + 1,
                    msg: "abnormal sample without mask".into(),
                });
            }
        }
        samples.push(CorpusSample {
            index: m.index,
            image,
            mask,
            anomaly_type: m.anomaly_type,
            holdout: m.holdout,
        });
    }
    if samples.is_empty() {
        return Err(SeasError::Data("empty corpus".into()));
    }
    Ok(Corpus {
        anomaly_types: names,
        samples,
    })
}

/// Similarity diagnostics: normal renders should agree with each other far
/// better than defect regions agree across abnormal samples.
pub struct ConsistencyReport {
    pub normal_correlation: f64,
    pub defect_correlation: f64,
}

impl ConsistencyReport {
    pub fn passes(&self) -> bool {
        self.normal_correlation > self.defect_correlation
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

pub fn consistency_check(corpus: &Corpus) -> Result<ConsistencyReport> {
    let normals = corpus.normals();
    let abnormals = corpus.abnormals();
    if normals.len() < 2 || abnormals.len() < 2 {
        return Err(SeasError::Data("need >= 2 normal and abnormal samples".into()));
    }
    let mut nsum = 0.0;
    let mut ncnt = 0usize;
    for i in 0..normals.len() {
        for j in i + 1..normals.len() {
            nsum += correlation(&normals[i].image.data, &normals[j].image.data);
            ncnt += 1;
        }
    }
    // compare defect regions pairwise on a common footing: correlate each
    // defect patch (masked pixels, channel means) against the other's patch
    // after resampling both pixel lists to a common length
    let mut dsum = 0.0;
    let mut dcnt = 0usize;
    let patch = |s: &CorpusSample| -> Vec<f64> {
        let m = s.mask.as_ref().unwrap();
        let mut vals = Vec::new();
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(y, x) > 0 {
                    let mut v = 0.0;
                    for ch in 0..s.image.c {
                        v += s.image.get(ch, y, x);
                    }
                    vals.push(v / s.image.c as f64);
                }
            }
        }
        vals
    };
    let resample = |v: &[f64], n: usize| -> Vec<f64> {
        (0..n).map(|i| v[i * v.len() / n]).collect()
    };
    for i in 0..abnormals.len() {
        for j in i + 1..abnormals.len() {
            let (pa, pb) = (patch(abnormals[i]), patch(abnormals[j]));
            let n = pa.len().min(pb.len()).max(4);
            dsum += correlation(&resample(&pa, n), &resample(&pb, n));
            dcnt += 1;
        }
    }
    Ok(ConsistencyReport {
        normal_correlation: nsum / ncnt as f64,
        defect_correlation: dsum / dcnt as f64,
    })
}
