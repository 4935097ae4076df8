use std::fs;
use std::path::{Path, PathBuf};

use super::image::{load_image, save_ppm, RawImage};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["rectangle", "disk", "triangle"];
pub const MAX_OBJECTS: usize = 5;

/// Pixel box `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyObject {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl ToyObject {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    fn overlap(&self, o: &ToyObject) -> f64 {
        let iw = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let ih = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        let inter = iw * ih;
        inter / (self.width() * self.height() + o.width() * o.height() - inter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub image: RawImage,
    pub objects: Vec<ToyObject>,
}

impl ToySample {
    /// `[3, S, S]` scaled to `[0, 1]`.
    pub fn tensor<T: Element>(&self) -> Tensor<T> {
        let (w, h) = (self.image.width, self.image.height);
        let mut data = vec![T::zero(); 3 * w * h];
        for (i, px) in self.image.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = T::lit(px[c] as f64 / 255.0);
            }
        }
        Tensor::from_vec(vec![3, h, w], data).expect("finite pixels")
    }

    /// One `class cx cy w h` line per object, normalized.
    pub fn label_text(&self) -> String {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        self.objects
            .iter()
            .map(|o| {
                let (cx, cy) = o.center();
                format!("{} {:.6} {:.6} {:.6} {:.6}\n", o.class_id, cx / w, cy / h, o.width() / w, o.height() / h)
            })
            .collect()
    }
}

fn random_color(rng: &mut Rng, lo: usize, hi: usize) -> [u8; 3] {
    [0, 0, 0].map(|_: u8| (lo + rng.below(hi - lo)) as u8)
}

fn inside(class_id: usize, o: &ToyObject, px: f64, py: f64) -> bool {
    let (cx, cy) = o.center();
    let (u, v) = ((px - o.x1) / o.width(), (py - o.y1) / o.height());
    match class_id {
        0 => true,
        1 => {
            let (dx, dy) = ((px - cx) / (o.width() / 2.0), (py - cy) / (o.height() / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        // apex at top centre, base along the bottom edge
        _ => (u - 0.5).abs() <= v / 2.0,
    }
}

fn draw(img: &mut RawImage, o: &ToyObject, color: [u8; 3]) {
    for y in o.y1 as usize..o.y2 as usize {
        for x in o.x1 as usize..o.x2 as usize {
            if inside(o.class_id, o, x as f64 + 0.5, y as f64 + 0.5) {
                img.set_pixel(x, y, color);
            }
        }
    }
}

/// One image with 1 to 5 shapes on a dark noisy background.
pub fn gen_sample(seed: u64, size: usize) -> ToySample {
    let mut rng = Rng::seed(seed);
    let bg = random_color(&mut rng, 0, 60);
    let mut image = RawImage::filled(size, size, bg);
    for p in image.data.iter_mut() {
        *p = p.saturating_add(rng.below(12) as u8);
    }
    let count = 1 + rng.below(MAX_OBJECTS);
    let (min_side, max_side) = ((size / 10).max(4), (size * 5 / 8).max(8));
    let mut objects: Vec<ToyObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let class_id = rng.below(NUM_CLASSES);
        let w = (min_side + rng.below(max_side - min_side + 1)) as f64;
        let h = (w * rng.range(0.7, 1.4)).round().clamp(min_side as f64, max_side as f64);
        let x1 = rng.below(size - w as usize + 1) as f64;
        let y1 = rng.below(size - h as usize + 1) as f64;
        let o = ToyObject {
            class_id,
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        if objects.iter().all(|p| p.overlap(&o) < 0.1) {
            draw(&mut image, &o, random_color(&mut rng, 120, 256));
            objects.push(o);
        }
    }
    ToySample { image, objects }
}

/// `count` samples; sample `i` is drawn from seed `seed ^ i`.
pub fn gen_toy_dataset(count: usize, seed: u64, size: usize) -> Result<Vec<ToySample>> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("image size {size} is not a positive multiple of 32")));
    }
    Ok((0..count).map(|i| gen_sample(seed ^ i as u64, size)).collect())
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

/// `NNNNN.ppm` + `NNNNN.txt` per sample.
pub fn write_toy_dataset(samples: &[ToySample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        save_ppm(&s.image, &dir.join(format!("{}.ppm", stem(i))))?;
        let path = dir.join(format!("{}.txt", stem(i)));
        fs::write(&path, s.label_text()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn parse_labels(text: &str, w: f64, h: f64, path: &Path) -> Result<Vec<ToyObject>> {
    let bad = |line: usize, msg: &str| Error::Data(format!("{}:{}: {msg}", path.display(), line + 1));
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(ln, "expected 'class cx cy w h'"));
        }
        let class_id: usize = f[0].parse().map_err(|_| bad(ln, "bad class id"))?;
        if class_id >= NUM_CLASSES {
            return Err(bad(ln, "class id out of range"));
        }
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(ln, "bad number"))?;
        if v.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) || v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(bad(ln, "box values must lie in [0, 1] with positive size"));
        }
        out.push(ToyObject {
            class_id,
            x1: (v[0] - v[2] / 2.0) * w,
            y1: (v[1] - v[3] / 2.0) * h,
            x2: (v[0] + v[2] / 2.0) * w,
            y2: (v[1] + v[3] / 2.0) * h,
        });
    }
    Ok(out)
}

/// Read every `*.ppm` in `dir` (sorted by name) with its sibling `.txt`.
pub fn load_toy_dataset(dir: &Path) -> Result<Vec<ToySample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .ppm images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let image = load_image(p)?;
            let lp = p.with_extension("txt");
            let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            let objects = parse_labels(&text, image.width as f64, image.height as f64, &lp)?;
            Ok(ToySample { image, objects })
        })
        .collect()
}
