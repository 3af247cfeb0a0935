//! Synthetic person-search scenes.
//!
//! A person is a head blob over a textured body rectangle. The body texture
//! is a fixed basis expansion of the identity's appearance vector, perturbed
//! per instance, so identities are learnable but not trivially separable.
//! Clutter rectangles share the body statistics but have no head.
//!
//! Every scene is rendered from its own named random stream, so parallel
//! and serial generation agree bit for bit.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::stream;

const MAGIC: &[u8; 4] = b"PSDS";
const VERSION: u32 = 1;

/// Fraction of a person's height taken by the head.
const HEAD_FRACTION: f64 = 0.22;
const HEAD_HALF_WIDTH: f64 = 0.22;
const MIN_BOX_SIDE: f64 = 8.0;
const MAX_PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Nuisance {
    /// Std-dev of a per-instance additive brightness offset.
    pub brightness: f64,
    /// Std-dev of a per-instance multiplicative contrast change.
    pub contrast: f64,
    /// Std-dev of per-instance Gaussian noise on the appearance coefficients.
    pub texture_jitter: f64,
    /// Std-dev of i.i.d. pixel noise.
    pub pixel_noise: f64,
}

impl Default for Nuisance {
    fn default() -> Self {
        Nuisance {
            brightness: 0.06,
            contrast: 0.10,
            texture_jitter: 0.35,
            pixel_noise: 0.05,
        }
    }
}

impl Nuisance {
    pub fn none() -> Self {
        Nuisance {
            brightness: 0.0,
            contrast: 0.0,
            texture_jitter: 0.0,
            pixel_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Number of labeled identities (the lookup-table width).
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub train_scenes: usize,
    pub gallery_scenes: usize,
    /// Gallery scenes searched per query.
    pub gallery_size: usize,
    pub queries_per_identity: usize,
    pub image_size: usize,
    pub max_persons: usize,
    pub appearance_dim: usize,
    pub min_identity_distance: f64,
    /// Probability that a person slot in a training scene is unlabeled.
    pub unlabeled_fraction: f64,
    pub person_height: (f64, f64),
    /// Width as a fraction of height.
    pub person_aspect: (f64, f64),
    pub max_clutter: usize,
    pub nuisance: Nuisance,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            num_labeled: 16,
            num_unlabeled: 8,
            train_scenes: 240,
            gallery_scenes: 60,
            gallery_size: 20,
            queries_per_identity: 12,
            image_size: 96,
            max_persons: 4,
            appearance_dim: 8,
            min_identity_distance: 0.5,
            unlabeled_fraction: 0.3,
            person_height: (30.0, 46.0),
            person_aspect: (0.42, 0.52),
            max_clutter: 3,
            nuisance: Nuisance::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    /// Lookup-table column, or `None` for an unlabeled identity.
    pub label: Option<usize>,
    pub appearance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Person {
    /// Index into [`DatasetSplit::identities`].
    pub identity: usize,
    pub label: Option<usize>,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Row-major single-channel intensities.
    pub image: Vec<f32>,
    pub persons: Vec<Person>,
    pub clutter: Vec<BBox>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.persons.iter().map(|p| p.bbox).collect()
    }

    /// The image as a `[1, height, width]` tensor.
    pub fn tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.image.iter().map(|&v| v as f64).collect(),
        )
        .expect("image size matches dims")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub identity: usize,
    /// Ground-truth box of the query person inside `scene`.
    pub bbox: BBox,
    pub scene: Scene,
    /// Indices into [`DatasetSplit::gallery`], ascending.
    pub gallery: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub seed: u64,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub image_size: usize,
    pub identities: Vec<IdentitySpec>,
    pub train: Vec<Scene>,
    pub gallery: Vec<Scene>,
    pub queries: Vec<Query>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Body texture basis evaluated at normalised body coordinates.
fn basis(k: usize, u: f64, v: f64) -> f64 {
    use std::f64::consts::PI;
    let torso = v < 0.5;
    match k % 8 {
        0 => f64::from(torso),
        1 => f64::from(!torso),
        2 => f64::from(torso) * (PI * u).cos(),
        3 => f64::from(!torso) * (PI * u).cos(),
        4 => (4.0 * PI * v).cos(),
        5 => f64::from(torso) * (2.0 * PI * u).cos(),
        6 => (PI * v).cos(),
        _ => (2.0 * PI * u).cos() * (2.0 * PI * v).cos(),
    }
}

fn texture(coeffs: &[f64], u: f64, v: f64) -> f64 {
    0.55 + 0.12
        * coeffs
            .iter()
            .enumerate()
            .map(|(k, a)| a * basis(k, u, v))
            .sum::<f64>()
}

fn sample_identities(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Vec<IdentitySpec>> {
    let total = cfg.num_labeled + cfg.num_unlabeled;
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(total);
    while out.len() < total {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let a: Vec<f64> = (0..cfg.appearance_dim).map(|_| normal(rng)).collect();
            let ok = out.iter().all(|o| {
                let d2: f64 = o.appearance.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum();
                d2.sqrt() > cfg.min_identity_distance
            });
            if ok {
                let i = out.len();
                out.push(IdentitySpec {
                    label: (i < cfg.num_labeled).then_some(i),
                    appearance: a,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place identity {} with pairwise appearance distance > {} after {} tries",
                out.len(),
                cfg.min_identity_distance,
                MAX_PLACEMENT_TRIES
            )));
        }
    }
    Ok(out)
}

/// Endless shuffled cycle over labeled identities, used so every identity
/// shows up about equally often.
struct IdentityCycle {
    queue: VecDeque<usize>,
    n: usize,
}

impl IdentityCycle {
    fn new(n: usize) -> Self {
        IdentityCycle {
            queue: VecDeque::new(),
            n,
        }
    }

    /// Next identity not already in `taken`.
    fn next(&mut self, taken: &[usize], rng: &mut ChaCha8Rng) -> usize {
        loop {
            if self.queue.len() < self.n {
                let mut perm: Vec<usize> = (0..self.n).collect();
                perm.shuffle(rng);
                self.queue.extend(perm);
            }
            if let Some(pos) = self.queue.iter().position(|i| !taken.contains(i)) {
                return self.queue.remove(pos).expect("position is valid");
            }
            // everything queued is taken: top up and retry
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(rng);
            self.queue.extend(perm);
        }
    }
}

struct Renderer<'a> {
    cfg: &'a DatasetConfig,
    identities: &'a [IdentitySpec],
}

impl Renderer<'_> {
    fn place_boxes(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
        let size = self.cfg.image_size as f64;
        let mut boxes: Vec<BBox> = Vec::new();
        for _ in 0..n {
            for _ in 0..MAX_PLACEMENT_TRIES {
                let h = rng.random_range(self.cfg.person_height.0..=self.cfg.person_height.1).min(size - 2.0);
                let w = (h * rng.random_range(self.cfg.person_aspect.0..=self.cfg.person_aspect.1))
                    .max(MIN_BOX_SIDE);
                let x1 = rng.random_range(1.0..=(size - 1.0 - w)).round();
                let y1 = rng.random_range(1.0..=(size - 1.0 - h)).round();
                let b = BBox::new(x1, y1, x1 + w.round(), y1 + h.round());
                if boxes.iter().all(|o| o.iou(&b) < 0.1) {
                    boxes.push(b);
                    break;
                }
            }
        }
        boxes
    }

    fn render(&self, identities: &[usize], rng: &mut ChaCha8Rng) -> Scene {
        let cfg = self.cfg;
        let n = cfg.image_size;
        let size = n as f64;
        let nz = &cfg.nuisance;

        let boxes = self.place_boxes(identities.len(), rng);
        let persons: Vec<Person> = boxes
            .iter()
            .zip(identities)
            .map(|(&bbox, &identity)| Person {
                identity,
                label: self.identities[identity].label,
                bbox,
            })
            .collect();

        let mut img = vec![0.0f64; n * n];
        let base = rng.random_range(0.0..0.15);
        let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        for y in 0..n {
            for x in 0..n {
                img[y * n + x] = base + gx * x as f64 / size + gy * y as f64 / size;
            }
        }

        let n_clutter = rng.random_range(0..=cfg.max_clutter);
        let mut clutter = Vec::new();
        for _ in 0..n_clutter {
            for _ in 0..MAX_PLACEMENT_TRIES {
                let w = rng.random_range(MIN_BOX_SIDE..=30.0f64).round();
                let h = rng.random_range(MIN_BOX_SIDE..=40.0f64).round();
                let x1 = rng.random_range(0.0..=(size - w)).round();
                let y1 = rng.random_range(0.0..=(size - h)).round();
                let b = BBox::new(x1, y1, x1 + w, y1 + h);
                if persons.iter().all(|p| p.bbox.iou(&b) == 0.0) {
                    let coeffs: Vec<f64> = (0..cfg.appearance_dim).map(|_| normal(rng)).collect();
                    paint(&mut img, n, &b, |u, v| Some(texture(&coeffs, u, v)));
                    clutter.push(b);
                    break;
                }
            }
        }

        for p in &persons {
            let app = &self.identities[p.identity].appearance;
            let coeffs: Vec<f64> = app.iter().map(|a| a + nz.texture_jitter * normal(rng)).collect();
            let brightness = nz.brightness * normal(rng);
            let contrast = 1.0 + nz.contrast * normal(rng);
            let head = 0.95;
            paint(&mut img, n, &p.bbox, |u, v| {
                if v < HEAD_FRACTION {
                    ((u - 0.5).abs() < HEAD_HALF_WIDTH).then_some(contrast * head + brightness)
                } else {
                    let vb = (v - HEAD_FRACTION) / (1.0 - HEAD_FRACTION);
                    Some(contrast * texture(&coeffs, u, vb) + brightness)
                }
            });
        }

        if nz.pixel_noise > 0.0 {
            for v in img.iter_mut() {
                *v += nz.pixel_noise * normal(rng);
            }
        }

        Scene {
            width: n,
            height: n,
            image: img.into_iter().map(|v| v as f32).collect(),
            persons,
            clutter,
        }
    }
}

/// Fills pixels whose centres lie in `b`; `f` gets normalised box coordinates
/// and may decline a pixel.
fn paint(img: &mut [f64], n: usize, b: &BBox, f: impl Fn(f64, f64) -> Option<f64>) {
    let (x0, x1) = (b.x1.max(0.0) as usize, (b.x2.min(n as f64)) as usize);
    let (y0, y1) = (b.y1.max(0.0) as usize, (b.y2.min(n as f64)) as usize);
    for y in y0..y1 {
        let v = (y as f64 + 0.5 - b.y1) / b.height();
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - b.x1) / b.width();
            if let Some(val) = f(u, v) {
                img[y * n + x] = val;
            }
        }
    }
}

fn validate(cfg: &DatasetConfig) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if cfg.num_labeled < 2 {
        return bad(format!("need at least 2 labeled identities, got {}", cfg.num_labeled));
    }
    if cfg.gallery_size > cfg.gallery_scenes {
        return bad(format!(
            "gallery size {} exceeds gallery scene count {}",
            cfg.gallery_size, cfg.gallery_scenes
        ));
    }
    if cfg.max_persons == 0 || cfg.max_persons > cfg.num_labeled {
        return bad(format!(
            "max_persons {} must be in [1, num_labeled]",
            cfg.max_persons
        ));
    }
    if cfg.person_height.0 < MIN_BOX_SIDE || cfg.person_height.1 + 2.0 > cfg.image_size as f64 {
        return bad(format!("person height range {:?} does not fit the image", cfg.person_height));
    }
    if cfg.appearance_dim == 0 {
        return bad("appearance_dim must be positive".into());
    }
    Ok(())
}

/// Generates train scenes, gallery scenes and queries for `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    generate(cfg, true)
}

fn generate(cfg: &DatasetConfig, parallel: bool) -> Result<DatasetSplit> {
    validate(cfg)?;
    let mut plan_rng = stream(cfg.seed, "dataset/plan", 0);
    let identities = sample_identities(cfg, &mut stream(cfg.seed, "dataset/identities", 0))?;
    let renderer = Renderer {
        cfg,
        identities: &identities,
    };

    let mut cycle = IdentityCycle::new(cfg.num_labeled);
    let mut plan = |n_scenes: usize, allow_unlabeled: bool, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..n_scenes)
            .map(|_| {
                let k = rng.random_range(1..=cfg.max_persons);
                let mut ids: Vec<usize> = Vec::with_capacity(k);
                let mut unlabeled_pool: Vec<usize> =
                    (cfg.num_labeled..cfg.num_labeled + cfg.num_unlabeled).collect();
                unlabeled_pool.shuffle(rng);
                for _ in 0..k {
                    let use_unlabeled =
                        allow_unlabeled && !unlabeled_pool.is_empty() && rng.random_bool(cfg.unlabeled_fraction);
                    let id = if use_unlabeled {
                        unlabeled_pool.pop().expect("nonempty")
                    } else {
                        cycle.next(&ids, rng)
                    };
                    ids.push(id);
                }
                ids
            })
            .collect()
    };
    let train_plan = plan(cfg.train_scenes, true, &mut plan_rng);
    let gallery_plan = plan(cfg.gallery_scenes, false, &mut plan_rng);

    let render_all = |name: &str, plans: &[Vec<usize>]| -> Vec<Scene> {
        let one = |(i, ids): (usize, &Vec<usize>)| renderer.render(ids, &mut stream(cfg.seed, name, i as u64));
        if parallel {
            plans.par_iter().enumerate().map(one).collect()
        } else {
            plans.iter().enumerate().map(one).collect()
        }
    };
    let train = render_all("dataset/train", &train_plan);
    let gallery = render_all("dataset/gallery", &gallery_plan);

    // Queries: one scene per query holding the query person; the gallery
    // subset mixes scenes that contain the identity with distractors.
    let mut query_specs = Vec::new();
    for id in 0..cfg.num_labeled {
        let holders: Vec<usize> = gallery
            .iter()
            .enumerate()
            .filter(|(_, s)| s.persons.iter().any(|p| p.identity == id))
            .map(|(i, _)| i)
            .collect();
        if holders.is_empty() {
            continue;
        }
        for q in 0..cfg.queries_per_identity {
            let mut rng = stream(cfg.seed, "dataset/query-plan", (id * cfg.queries_per_identity + q) as u64);
            let others: Vec<usize> = (0..cfg.gallery_scenes).filter(|i| !holders.contains(i)).collect();
            let n_pos = holders.len().min((cfg.gallery_size / 2).max(1)).min(cfg.gallery_size);
            let mut subset: Vec<usize> = holders.choose_multiple(&mut rng, n_pos).copied().collect();
            let n_neg = (cfg.gallery_size - n_pos).min(others.len());
            subset.extend(others.choose_multiple(&mut rng, n_neg).copied());
            subset.sort_unstable();
            let k = rng.random_range(1..=cfg.max_persons);
            let mut ids = vec![id];
            while ids.len() < k {
                let other = rng.random_range(0..cfg.num_labeled);
                if !ids.contains(&other) {
                    ids.push(other);
                }
            }
            query_specs.push((id, ids, subset));
        }
    }
    let one_query = |(i, (id, ids, subset)): (usize, &(usize, Vec<usize>, Vec<usize>))| -> Option<Query> {
        let scene = renderer.render(ids, &mut stream(cfg.seed, "dataset/query", i as u64));
        let bbox = scene.persons.iter().find(|p| p.identity == *id)?.bbox;
        Some(Query {
            identity: *id,
            bbox,
            scene,
            gallery: subset.clone(),
        })
    };
    let queries: Vec<Query> = if parallel {
        query_specs.par_iter().enumerate().filter_map(one_query).collect()
    } else {
        query_specs.iter().enumerate().filter_map(one_query).collect()
    };

    Ok(DatasetSplit {
        seed: cfg.seed,
        num_labeled: cfg.num_labeled,
        num_unlabeled: cfg.num_unlabeled,
        image_size: cfg.image_size,
        identities,
        train,
        gallery,
        queries,
    })
}

fn put_scene(w: &mut Writer, s: &Scene) {
    w.u32(s.width as u32);
    w.u32(s.height as u32);
    w.len_prefixed(s.persons.len());
    for p in &s.persons {
        w.u32(p.identity as u32);
        w.i32(p.label.map_or(-1, |l| l as i32));
        for v in p.bbox.to_array() {
            w.f64(v);
        }
    }
    w.len_prefixed(s.clutter.len());
    for b in &s.clutter {
        for v in b.to_array() {
            w.f64(v);
        }
    }
    for &v in &s.image {
        w.f32(v);
    }
}

fn get_box(r: &mut Reader) -> Result<BBox> {
    Ok(BBox::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?))
}

fn get_scene(r: &mut Reader, n_identities: usize) -> Result<Scene> {
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let n_persons = r.count(40)?;
    let mut persons = Vec::with_capacity(n_persons);
    for _ in 0..n_persons {
        let at = r.offset();
        let identity = r.u32()? as usize;
        let label = r.i32()?;
        if identity >= n_identities {
            return Err(r.err_at(at, format!("identity {identity} out of range")));
        }
        persons.push(Person {
            identity,
            label: (label >= 0).then_some(label as usize),
            bbox: get_box(r)?,
        });
    }
    let n_clutter = r.count(32)?;
    let clutter = (0..n_clutter).map(|_| get_box(r)).collect::<Result<_>>()?;
    let image = (0..width * height).map(|_| r.f32()).collect::<Result<_>>()?;
    Ok(Scene {
        width,
        height,
        image,
        persons,
        clutter,
    })
}

pub fn encode_dataset(split: &DatasetSplit) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.begin(b"HEAD");
    w.u64(split.seed);
    w.u32(split.num_labeled as u32);
    w.u32(split.num_unlabeled as u32);
    w.u32(split.image_size as u32);
    w.u32(split.image_size as u32);
    w.u32(1); // channels
    w.begin(b"IDEN");
    w.len_prefixed(split.identities.len());
    for id in &split.identities {
        w.i32(id.label.map_or(-1, |l| l as i32));
        w.len_prefixed(id.appearance.len());
        for &a in &id.appearance {
            w.f64(a);
        }
    }
    for (tag, scenes) in [(b"TRAN", &split.train), (b"GALL", &split.gallery)] {
        w.begin(tag);
        w.len_prefixed(scenes.len());
        for s in scenes {
            put_scene(&mut w, s);
        }
    }
    w.begin(b"QURY");
    w.len_prefixed(split.queries.len());
    for q in &split.queries {
        w.u32(q.identity as u32);
        for v in q.bbox.to_array() {
            w.f64(v);
        }
        w.len_prefixed(q.gallery.len());
        for &g in &q.gallery {
            w.u32(g as u32);
        }
        put_scene(&mut w, &q.scene);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetSplit> {
    let (mut r, version) = Reader::open(bytes, "dataset", MAGIC)?;
    if version != VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    r.section(b"HEAD")?;
    let seed = r.u64()?;
    let num_labeled = r.u32()? as usize;
    let num_unlabeled = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u32()?;
    if height != width || channels != 1 {
        return Err(r.err_at(r.offset(), format!("unsupported image {width}x{height}x{channels}")));
    }
    r.section(b"IDEN")?;
    let n_ids = r.count(8)?;
    let mut identities = Vec::with_capacity(n_ids);
    for _ in 0..n_ids {
        let label = r.i32()?;
        let dim = r.count(8)?;
        let appearance = (0..dim).map(|_| r.f64()).collect::<Result<_>>()?;
        identities.push(IdentitySpec {
            label: (label >= 0).then_some(label as usize),
            appearance,
        });
    }
    let scenes = |tag: &[u8; 4], r: &mut Reader| -> Result<Vec<Scene>> {
        r.section(tag)?;
        let n = r.count(16)?;
        (0..n).map(|_| get_scene(r, n_ids)).collect()
    };
    let train = scenes(b"TRAN", &mut r)?;
    let gallery = scenes(b"GALL", &mut r)?;
    r.section(b"QURY")?;
    let nq = r.count(44)?;
    let mut queries = Vec::with_capacity(nq);
    for _ in 0..nq {
        let identity = r.u32()? as usize;
        let bbox = get_box(&mut r)?;
        let ng = r.count(4)?;
        let at = r.offset();
        let gallery_idx: Vec<usize> = (0..ng).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        if let Some(bad) = gallery_idx.iter().find(|&&g| g >= gallery.len()) {
            return Err(r.err_at(at, format!("query gallery index {bad} out of range")));
        }
        let scene = get_scene(&mut r, n_ids)?;
        queries.push(Query {
            identity,
            bbox,
            scene,
            gallery: gallery_idx,
        });
    }
    r.finish()?;
    Ok(DatasetSplit {
        seed,
        num_labeled,
        num_unlabeled,
        image_size: width,
        identities,
        train,
        gallery,
        queries,
    })
}

pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    codec::write_file(path, &encode_dataset(split))
}

pub fn read_dataset(path: &Path) -> Result<DatasetSplit> {
    decode_dataset(&codec::read_file(path)?)
}
