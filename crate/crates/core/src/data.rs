//! Seeded synthetic image-classification tasks.
//!
//! Three families with different label laws:
//!
//! * `shape-class`: one filled or outlined shape, label = shape kind.
//! * `quadrant-class`: one small square, label = region of the image it sits in.
//! * `count-class`: `k + 1` small dots, label = `k`.
//!
//! Each split draws from its own named random stream, so the splits never
//! share samples by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{PackData, TensorPack};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    ShapeClass,
    QuadrantClass,
    CountClass,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ShapeClass => "shape-class",
            TaskFamily::QuadrantClass => "quadrant-class",
            TaskFamily::CountClass => "count-class",
        }
    }

    /// Largest class count the family supports.
    pub fn max_classes(self) -> usize {
        match self {
            TaskFamily::ShapeClass => SHAPES,
            TaskFamily::QuadrantClass => 4,
            TaskFamily::CountClass => 8,
        }
    }

    /// Largest supported class count not above `k` (at least 2).
    pub fn fit_classes(self, k: usize) -> usize {
        let k = k.clamp(2, self.max_classes());
        if self == TaskFamily::QuadrantClass && k == 3 {
            2
        } else {
            k
        }
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape-class" => Ok(TaskFamily::ShapeClass),
            "quadrant-class" => Ok(TaskFamily::QuadrantClass),
            "count-class" => Ok(TaskFamily::CountClass),
            _ => Err(Error::Config(format!("unknown task family `{s}`"))),
        }
    }
}

const SHAPES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub family: TaskFamily,
    /// Square image side in pixels.
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        let max = self.family.max_classes();
        if self.num_classes < 2 || self.num_classes > max {
            return bad(format!(
                "{} supports 2..={max} classes, got {}",
                self.family, self.num_classes
            ));
        }
        if self.family == TaskFamily::QuadrantClass && self.num_classes == 3 {
            return bad("quadrant-class needs 2 or 4 classes".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!(
                "noise {} must be finite and nonnegative",
                self.noise
            ));
        }
        if self.train == 0 {
            return bad("train split is empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Images `[n, H, W, C]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Gathers the examples at `indices` into one batch.
    pub fn batch<F: Element>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let src = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend(src[i * per..(i + 1) * per].iter().map(|&v| F::of(v as f64)));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), h, w, c], out).expect("batch shape");
        (t, labels)
    }

    pub fn to_pack(&self) -> TensorPack {
        let mut p = TensorPack::new();
        p.insert_tensor("images", &self.images).expect("fresh pack");
        let labels = self.labels.iter().map(|&l| l as i64).collect();
        p.insert("labels", vec![self.len()], PackData::I64(labels))
            .expect("fresh pack");
        p.insert_scalar_i64("num_classes", self.num_classes as i64)
            .expect("fresh pack");
        p
    }

    pub fn from_pack(pack: &TensorPack) -> Result<Self> {
        let images = pack.tensor::<f32>("images")?;
        let labels = pack
            .i64_values("labels")?
            .iter()
            .map(|&l| usize::try_from(l).map_err(|_| Error::Format(format!("negative label {l}"))))
            .collect::<Result<Vec<_>>>()?;
        let k = pack.scalar_i64("num_classes")?;
        let k = usize::try_from(k).map_err(|_| Error::Format(format!("bad class count {k}")))?;
        Self::new(images, labels, k)
    }
}

/// The three splits of one generated task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn generate(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    Ok(TaskData {
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        test: generate_split(spec, Split::Test)?,
    })
}

pub fn generate_split(spec: &SyntheticTaskSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let n = match split {
        Split::Train => spec.train,
        Split::Val => spec.val,
        Split::Test => spec.test,
    };
    let s = spec.image_size;
    let c = spec.channels;
    let mut r = rng::stream(spec.seed, &format!("data/{}/{}", spec.family, split.name()));
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).unwrap());
    let mut images = Vec::with_capacity(n * s * s * c);
    let mut labels = Vec::with_capacity(n);
    let mut canvas = vec![0f32; s * s];
    for _ in 0..n {
        let label = r.random_range(0..spec.num_classes);
        canvas.fill(0.0);
        let ink = r.random_range(0.6f32..1.0);
        match spec.family {
            TaskFamily::ShapeClass => draw_shape(&mut canvas, s, label, ink, &mut r),
            TaskFamily::QuadrantClass => {
                draw_region_square(&mut canvas, s, label, spec.num_classes, ink, &mut r)
            }
            TaskFamily::CountClass => draw_dots(&mut canvas, s, label + 1, ink, &mut r),
        }
        for &v in &canvas {
            for _ in 0..c {
                let e = noise.map_or(0.0, |d| d.sample(&mut r) as f32);
                images.push(v + e);
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, s, s, c], images)?;
    Dataset::new(images, labels, spec.num_classes)
}

fn draw_shape(canvas: &mut [f32], s: usize, kind: usize, ink: f32, r: &mut ChaCha8Rng) {
    let sf = s as f32;
    let rad = r.random_range(0.2 * sf..0.35 * sf);
    let cx = r.random_range(rad..=sf - rad);
    let cy = r.random_range(rad..=sf - rad);
    for y in 0..s {
        for x in 0..s {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let (ax, ay) = (dx.abs(), dy.abs());
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = match kind {
                0 => ax <= rad && ay <= rad,
                1 => dist <= rad,
                2 => dist <= rad && dist >= 0.55 * rad,
                3 => (ax <= rad / 3.0 && ay <= rad) || (ay <= rad / 3.0 && ax <= rad),
                4 => ay <= rad && ax <= (dy + rad) / 2.0,
                _ => ax.max(ay) <= rad && ax.max(ay) >= 0.55 * rad,
            };
            if inside {
                canvas[y * s + x] = ink;
            }
        }
    }
}

/// Label `region` of a 2x2 grid (4 classes) or the left/right halves (2 classes).
fn draw_region_square(
    canvas: &mut [f32],
    s: usize,
    region: usize,
    classes: usize,
    ink: f32,
    r: &mut ChaCha8Rng,
) {
    let (rw, rh, ox, oy) = if classes == 2 {
        (s / 2, s, region * (s / 2), 0)
    } else {
        (s / 2, s / 2, (region % 2) * (s / 2), (region / 2) * (s / 2))
    };
    let side = r.random_range((s / 8).max(2)..=(s / 4).max(2));
    let x0 = ox + r.random_range(0..=rw - side);
    let y0 = oy + r.random_range(0..=rh - side);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            canvas[y * s + x] = ink;
        }
    }
}

fn draw_dots(canvas: &mut [f32], s: usize, count: usize, ink: f32, r: &mut ChaCha8Rng) {
    let side = (s / 16).max(1) + 1;
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
    // Rejection sampling with a one-pixel gap; the class bounds keep this
    // feasible for every supported image size.
    while placed.len() < count {
        let x = r.random_range(0..=s - side);
        let y = r.random_range(0..=s - side);
        let clear = placed
            .iter()
            .all(|&(px, py)| x + side < px || px + side < x || y + side < py || py + side < y);
        if clear {
            placed.push((x, y));
        }
    }
    for (x0, y0) in placed {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                canvas[y * s + x] = ink;
            }
        }
    }
}
