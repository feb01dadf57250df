//! Synthetic multi-season tile generator and dataset access.
//!
//! Each tile is a (T, 3, H, W) reflectance stack plus a species mask.
//! Crowns are non-overlapping ellipses; pixels off any crown are labeled
//! [`IGNORE`]. Two species in every generated set share identical colors
//! through the reference frame and separate only afterwards, so a model
//! shown a single frame cannot tell them apart while a model shown the
//! full stack can. Everything is derived from one seed and is
//! reproducible byte for byte.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_tensor, write_atomic, write_json_atomic, write_tensor};
use crate::mask::{Mask, IGNORE};
use crate::models::REFERENCE_TIME_INDEX;
use crate::taxonomy::Taxonomy;
use crate::tensor::Tensor;
use crate::viz::{read_pgm, write_pgm};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds `parts` into `base` so unrelated consumers of one run seed get
/// independent streams. Same inputs, same output, on every platform.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &p in parts {
        s = splitmix64(s ^ splitmix64(p));
    }
    s
}

/// Stream tag for per-tile generator state.
const TILE_STREAM: u64 = 0x54494C45;

/// How one species looks and grows.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeciesSignature {
    pub name: String,
    pub genus: String,
    pub taxon: String,
    /// Display color for rendered previews.
    pub color: [u8; 3],
    /// Mean crown reflectance per time step, RGB in [0, 1].
    pub rgb_by_step: Vec<[f64; 3]>,
    /// Half-width of the per-pixel brightness variation inside a crown.
    pub texture_amplitude: f64,
    /// Ellipse semi-axis bounds in pixels.
    pub radius_range: (f64, f64),
}

/// Capture dates for the default four-step stack: early summer, two early
/// fall passes, late fall. Index 2 is the reference frame.
pub fn default_time_tags() -> Vec<String> {
    ["2021-06-15", "2021-09-02", "2021-09-21", "2021-10-10"]
        .map(str::to_string)
        .to_vec()
}

/// Six species over four time steps. ACRU and BEAL match exactly through
/// the reference frame and split in the last one.
pub fn default_signatures() -> Vec<SpeciesSignature> {
    let sig = |name: &str,
               genus: &str,
               taxon: &str,
               color: [u8; 3],
               steps: [[f64; 3]; 4],
               tex: f64,
               radius: (f64, f64)| SpeciesSignature {
        name: name.to_string(),
        genus: genus.to_string(),
        taxon: taxon.to_string(),
        color,
        rgb_by_step: steps.to_vec(),
        texture_amplitude: tex,
        radius_range: radius,
    };
    let shared_early = [[0.20, 0.55, 0.20], [0.22, 0.52, 0.20], [0.24, 0.50, 0.20]];
    vec![
        sig(
            "ACRU",
            "Acer",
            "broadleaf",
            [196, 60, 54],
            [shared_early[0], shared_early[1], shared_early[2], [0.80, 0.15, 0.10]],
            0.04,
            (3.0, 6.0),
        ),
        sig(
            "BEAL",
            "Betula",
            "broadleaf",
            [230, 178, 60],
            [shared_early[0], shared_early[1], shared_early[2], [0.55, 0.60, 0.12]],
            0.04,
            (3.0, 6.0),
        ),
        sig(
            "PIST",
            "Pinus",
            "conifer",
            [38, 84, 56],
            [[0.05, 0.30, 0.12]; 4],
            0.05,
            (2.5, 5.5),
        ),
        sig(
            "Populus",
            "Populus",
            "broadleaf",
            [120, 190, 80],
            [
                [0.30, 0.58, 0.22],
                [0.45, 0.55, 0.16],
                [0.60, 0.52, 0.12],
                [0.72, 0.60, 0.18],
            ],
            0.03,
            (3.0, 6.5),
        ),
        sig(
            "FAGR",
            "Fagus",
            "broadleaf",
            [152, 110, 205],
            [
                [0.16, 0.44, 0.14],
                [0.22, 0.42, 0.12],
                [0.34, 0.38, 0.10],
                [0.55, 0.35, 0.12],
            ],
            0.06,
            (3.5, 7.0),
        ),
        sig(
            "DEAD",
            "Dead",
            "other",
            [130, 121, 112],
            [[0.35, 0.30, 0.25]; 4],
            0.02,
            (2.0, 4.5),
        ),
    ]
}

/// Tile geometry and nuisance parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub crowns_per_tile: usize,
    /// Sampling weight per signature; crown counts follow these
    /// proportions across the whole dataset.
    pub species_weights: Vec<f64>,
    /// Per pixel, per step, per channel gaussian noise.
    pub noise_sigma: f64,
    /// Per crown, per channel shift, constant across time.
    pub color_jitter_sigma: f64,
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            crowns_per_tile: 6,
            species_weights: vec![1.0; default_signatures().len()],
            noise_sigma: 0.02,
            color_jitter_sigma: 0.01,
            background: [0.07, 0.10, 0.06],
        }
    }
}

/// Builds the three-level taxonomy implied by the signatures, genera and
/// taxa ordered by first appearance.
pub fn taxonomy_from_signatures(sigs: &[SpeciesSignature]) -> Result<Taxonomy> {
    let mut genera: Vec<(&str, &str)> = Vec::new();
    for s in sigs {
        match genera.iter().find(|(g, _)| *g == s.genus) {
            None => genera.push((&s.genus, &s.taxon)),
            Some((_, t)) if *t != s.taxon => {
                return Err(Error::Taxonomy(format!(
                    "genus {} is mapped to both {t} and {}",
                    s.genus, s.taxon
                )))
            }
            Some(_) => {}
        }
    }
    let species: Vec<_> = sigs
        .iter()
        .map(|s| {
            serde_json::json!({
                "name": s.name,
                "genus": s.genus,
                "color": format!("#{:02X}{:02X}{:02X}", s.color[0], s.color[1], s.color[2]),
            })
        })
        .collect();
    let genera: Vec<_> = genera
        .iter()
        .map(|(g, t)| serde_json::json!({"name": g, "taxon": t}))
        .collect();
    Taxonomy::from_json_str(&serde_json::json!({"species": species, "genera": genera}).to_string())
}

/// Finds the one species pair that is identical at every step up to and
/// including the reference frame but differs later.
fn find_confusable_pair(sigs: &[SpeciesSignature]) -> Result<(usize, usize)> {
    let t_steps = sigs.first().map(|s| s.rgb_by_step.len()).unwrap_or(0);
    let mut found = Vec::new();
    for i in 0..sigs.len() {
        for j in i + 1..sigs.len() {
            let same_until_ref = (0..=REFERENCE_TIME_INDEX)
                .all(|t| sigs[i].rgb_by_step[t] == sigs[j].rgb_by_step[t]);
            let differs_later = (REFERENCE_TIME_INDEX + 1..t_steps)
                .any(|t| sigs[i].rgb_by_step[t] != sigs[j].rgb_by_step[t]);
            if same_until_ref && differs_later {
                found.push((i, j));
            }
        }
    }
    match found.as_slice() {
        [pair] => Ok(*pair),
        [] => Err(Error::invalid(
            "no species pair is identical through the reference frame yet differs later",
        )),
        many => Err(Error::invalid(format!(
            "{} species pairs are identical through the reference frame, wanted exactly one",
            many.len()
        ))),
    }
}

fn validate_inputs(scene: &SceneSpec, sigs: &[SpeciesSignature]) -> Result<(usize, usize)> {
    let mut problems = Vec::new();
    if sigs.is_empty() {
        problems.push("no species signatures".to_string());
    }
    let t_steps = sigs.first().map(|s| s.rgb_by_step.len()).unwrap_or(0);
    if t_steps <= REFERENCE_TIME_INDEX + 1 {
        problems.push(format!(
            "signatures carry {t_steps} time steps, the reference frame at index {REFERENCE_TIME_INDEX} needs at least {}",
            REFERENCE_TIME_INDEX + 2
        ));
    }
    for (i, s) in sigs.iter().enumerate() {
        if s.name.is_empty() || s.genus.is_empty() || s.taxon.is_empty() {
            problems.push(format!("signature {i} has an empty name, genus, or taxon"));
        }
        if sigs[..i].iter().any(|o| o.name == s.name) {
            problems.push(format!("duplicate species name {}", s.name));
        }
        if s.rgb_by_step.len() != t_steps {
            problems.push(format!(
                "{} has {} time steps, {} has {t_steps}",
                s.name,
                s.rgb_by_step.len(),
                sigs[0].name
            ));
        }
        let (lo, hi) = s.radius_range;
        if !(lo > 0.0 && hi >= lo) {
            problems.push(format!("{} radius range ({lo}, {hi}) is not 0 < lo <= hi", s.name));
        }
        let fits = (scene.width.min(scene.height) as f64) > 2.0 * (hi + 1.0);
        if !fits {
            problems.push(format!(
                "{} max radius {hi} cannot fit a {}x{} tile with a 1px margin",
                s.name, scene.height, scene.width
            ));
        }
        if !(0.0..=0.5).contains(&s.texture_amplitude) {
            problems.push(format!("{} texture amplitude {} outside [0, 0.5]", s.name, s.texture_amplitude));
        }
    }
    if scene.height < 8 || scene.width < 8 {
        problems.push(format!("tile {}x{} is smaller than 8x8", scene.height, scene.width));
    }
    if scene.crowns_per_tile == 0 {
        problems.push("crowns_per_tile is zero".to_string());
    }
    if scene.species_weights.len() != sigs.len() {
        problems.push(format!(
            "{} species weights for {} signatures",
            scene.species_weights.len(),
            sigs.len()
        ));
    }
    if scene.species_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        problems.push("species weights must be finite and nonnegative".to_string());
    }
    if scene.species_weights.iter().sum::<f64>() <= 0.0 {
        problems.push("species weights sum to zero".to_string());
    }
    for (what, v) in [("noise_sigma", scene.noise_sigma), ("color_jitter_sigma", scene.color_jitter_sigma)] {
        if !(0.0..=0.5).contains(&v) {
            problems.push(format!("{what} {v} outside [0, 0.5]"));
        }
    }
    if scene.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
        problems.push("background components must sit in [0, 1]".to_string());
    }
    let pair = match find_confusable_pair(sigs) {
        Ok(p) => Some(p),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };
    if let Some((a, b)) = pair {
        if scene.species_weights.len() == sigs.len()
            && (scene.species_weights[a] <= 0.0 || scene.species_weights[b] <= 0.0)
        {
            problems.push(format!(
                "confusable species {} and {} need nonzero sampling weight",
                sigs[a].name, sigs[b].name
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    Ok(pair.expect("pair present when no problems"))
}

/// Deterministic proportional scheduler: crown `k` of the dataset gets the
/// species with the largest accumulated deficit, ties to the lower id.
fn proportional_schedule(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let mut credit = vec![0.0f64; weights.len()];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        for (c, w) in credit.iter_mut().zip(weights) {
            *c += w / sum;
        }
        let mut best = 0;
        for i in 1..credit.len() {
            if credit[i] > credit[best] + 1e-12 {
                best = i;
            }
        }
        credit[best] -= 1.0;
        out.push(best);
    }
    out
}

struct Crown {
    species: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Crown {
    fn bound(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

fn render_tile(
    scene: &SceneSpec,
    sigs: &[SpeciesSignature],
    slots: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Mask, Vec<usize>, Tensor<f32>) {
    let (h, w) = (scene.height, scene.width);
    let mut crowns: Vec<Crown> = Vec::new();
    for &s in slots {
        let (lo, hi) = sigs[s].radius_range;
        // rejection sampling; a crowded tile just ends up with fewer crowns
        for _ in 0..30 {
            let rx = lo + rng.gen::<f64>() * (hi - lo);
            let ry = lo + rng.gen::<f64>() * (hi - lo);
            let margin = rx.max(ry) + 1.0;
            let cx = margin + rng.gen::<f64>() * (w as f64 - 2.0 * margin);
            let cy = margin + rng.gen::<f64>() * (h as f64 - 2.0 * margin);
            let rb = rx.max(ry);
            let clear = crowns.iter().all(|c| {
                let (dx, dy) = (c.cx - cx, c.cy - cy);
                (dx * dx + dy * dy).sqrt() >= rb + c.bound() + 1.0
            });
            if clear {
                crowns.push(Crown { species: s, cx, cy, rx, ry });
                break;
            }
        }
    }

    let mut mask = Mask::filled(h, w, IGNORE);
    let mut owner = vec![usize::MAX; h * w];
    for (k, c) in crowns.iter().enumerate() {
        let r0 = (c.cy - c.ry - 1.0).max(0.0) as usize;
        let r1 = ((c.cy + c.ry + 1.0) as usize).min(h - 1);
        let c0 = (c.cx - c.rx - 1.0).max(0.0) as usize;
        let c1 = ((c.cx + c.rx + 1.0) as usize).min(w - 1);
        for r in r0..=r1 {
            for col in c0..=c1 {
                // 4x4 supersampled coverage, half or more claims the pixel
                let mut inside = 0;
                for sr in 0..4 {
                    for sc in 0..4 {
                        let y = r as f64 + (sr as f64 + 0.5) / 4.0;
                        let x = col as f64 + (sc as f64 + 0.5) / 4.0;
                        let (u, v) = ((x - c.cx) / c.rx, (y - c.cy) / c.ry);
                        if u * u + v * v <= 1.0 {
                            inside += 1;
                        }
                    }
                }
                if inside >= 8 {
                    mask.set(r, col, c.species as u8);
                    owner[r * w + col] = k;
                }
            }
        }
    }

    let jitter_dist = Normal::new(0.0, scene.color_jitter_sigma).expect("validated sigma");
    let jitter: Vec<[f64; 3]> = crowns
        .iter()
        .map(|_| [(); 3].map(|_| jitter_dist.sample(rng)))
        .collect();
    let mut texture = vec![0.0f64; h * w];
    for (px, &k) in owner.iter().enumerate() {
        if k != usize::MAX {
            let amp = sigs[crowns[k].species].texture_amplitude;
            texture[px] = (rng.gen::<f64>() * 2.0 - 1.0) * amp;
        }
    }

    let t_steps = sigs[0].rgb_by_step.len();
    let noise = Normal::new(0.0, scene.noise_sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(t_steps * 3 * h * w);
    for t in 0..t_steps {
        for ch in 0..3 {
            for px in 0..h * w {
                let base = match owner[px] {
                    usize::MAX => scene.background[ch],
                    k => {
                        sigs[crowns[k].species].rgb_by_step[t][ch] + jitter[k][ch] + texture[px]
                    }
                };
                let v = base + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let image = Tensor::new(vec![t_steps, 3, h, w], data).expect("sized above");
    (mask, crowns.iter().map(|c| c.species).collect(), image)
}

/// Which band a tile belongs to. Unassigned tiles count as training data.
#[derive(Copy, Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SplitId {
    Train,
    Val,
    Test,
    /// Discarded entirely; keeps val/test spatially separated from train.
    Buffer,
}

impl SplitId {
    pub fn name(self) -> &'static str {
        match self {
            SplitId::Train => "train",
            SplitId::Val => "val",
            SplitId::Test => "test",
            SplitId::Buffer => "buffer",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub row: usize,
    pub col: usize,
    pub split: Option<SplitId>,
    pub image_file: String,
    pub mask_file: String,
    /// Species id of every crown placed in the tile.
    pub crown_species: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub tile_height: usize,
    pub tile_width: usize,
    pub time_steps: usize,
    pub reference_time_index: usize,
    pub time_step_tags: Vec<String>,
    pub confusable_pair: [String; 2],
    /// Species names in label order; the taxonomy file is the authority.
    pub species: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

/// A generated dataset on disk: manifest, taxonomy, and tile files.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub taxonomy: Taxonomy,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        let taxonomy = Taxonomy::from_path(&root.join("taxonomy.json"))?;
        let mpath = root.join("manifest.json");
        if manifest.format_version != 1 {
            return Err(Error::format(
                &mpath,
                format!("format_version {} is not 1", manifest.format_version),
            ));
        }
        if manifest.species != taxonomy.species_names() {
            return Err(Error::format(
                &mpath,
                "species list disagrees with taxonomy.json".to_string(),
            ));
        }
        if manifest.time_step_tags.len() != manifest.time_steps {
            return Err(Error::format(
                &mpath,
                format!(
                    "{} time step tags for {} steps",
                    manifest.time_step_tags.len(),
                    manifest.time_steps
                ),
            ));
        }
        if manifest.reference_time_index >= manifest.time_steps {
            return Err(Error::format(
                &mpath,
                format!(
                    "reference_time_index {} outside the {} steps",
                    manifest.reference_time_index, manifest.time_steps
                ),
            ));
        }
        for name in &manifest.confusable_pair {
            if !manifest.species.contains(name) {
                return Err(Error::format(
                    &mpath,
                    format!("confusable species {name} is not in the species list"),
                ));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            taxonomy,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load_sample(&self, idx: usize) -> Result<(Tensor<f32>, Mask)> {
        let Some(rec) = self.manifest.samples.get(idx) else {
            return Err(Error::invalid(format!(
                "sample {idx} outside the {} tiles",
                self.len()
            )));
        };
        let m = &self.manifest;
        let img = read_tensor::<f32>(&self.root.join(&rec.image_file))?;
        let want = [m.time_steps, 3, m.tile_height, m.tile_width];
        if img.shape() != want {
            return Err(Error::format(
                &self.root.join(&rec.image_file),
                format!("tile shape {:?}, manifest says {want:?}", img.shape()),
            ));
        }
        let mask = read_pgm(&self.root.join(&rec.mask_file))?;
        if (mask.h, mask.w) != (m.tile_height, m.tile_width) {
            return Err(Error::format(
                &self.root.join(&rec.mask_file),
                format!(
                    "mask is {}x{}, manifest says {}x{}",
                    mask.h, mask.w, m.tile_height, m.tile_width
                ),
            ));
        }
        let species = self.taxonomy.num_species() as u16;
        for &v in &mask.data {
            if v != IGNORE && (v as u16) >= species {
                return Err(Error::format(
                    &self.root.join(&rec.mask_file),
                    format!("label {v} exceeds the {species} known species"),
                ));
            }
        }
        Ok((img, mask))
    }

    pub fn split_of(&self, idx: usize) -> SplitId {
        self.manifest.samples[idx].split.unwrap_or(SplitId::Train)
    }

    pub fn indices_of(&self, split: SplitId) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_of(i) == split).collect()
    }

    pub fn iter_split(
        &self,
        split: SplitId,
    ) -> impl Iterator<Item = Result<(Tensor<f32>, Mask)>> + '_ {
        self.indices_of(split).into_iter().map(|i| self.load_sample(i))
    }

    pub fn save_manifest(&self) -> Result<()> {
        write_json_atomic(&self.root.join("manifest.json"), &self.manifest)
    }

    /// Assigns every tile to a column band and rewrites the manifest.
    /// Returns the per-column layout.
    pub fn assign_splits(&mut self, ratios: (f64, f64, f64), buffer: usize) -> Result<Vec<SplitId>> {
        let bands = spatial_split(self.manifest.grid_cols, ratios, buffer)?;
        for rec in &mut self.manifest.samples {
            rec.split = Some(bands[rec.col]);
        }
        self.save_manifest()?;
        Ok(bands)
    }
}

/// Splits grid columns into `train | buffer | val | buffer | test` bands.
///
/// The non-buffer columns are apportioned by largest remainder over the
/// given ratios. Leakage through adjacency is impossible by construction:
/// no train column touches a val or test column.
pub fn spatial_split(cols: usize, ratios: (f64, f64, f64), buffer: usize) -> Result<Vec<SplitId>> {
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be positive")));
    }
    let sum: f64 = parts.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("split ratios {ratios:?} sum to {sum}, want 1")));
    }
    if buffer == 0 {
        return Err(Error::invalid("buffer must be at least one column"));
    }
    let assignable = cols
        .checked_sub(2 * buffer)
        .filter(|&a| a >= 3)
        .ok_or_else(|| {
            Error::invalid(format!(
                "{cols} columns cannot host three bands plus two {buffer}-column buffers"
            ))
        })?;

    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    for i in 0..3 {
        let target = parts[i] * assignable as f64;
        counts[i] = target as usize;
        remainders[i] = target - counts[i] as f64;
    }
    let mut leftover = assignable - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    for (count, name) in counts.iter().zip(["train", "val", "test"]) {
        if *count == 0 {
            return Err(Error::invalid(format!(
                "the {name} band received no columns; widen the grid or adjust the ratios"
            )));
        }
    }
    let mut bands = Vec::with_capacity(cols);
    bands.extend(std::iter::repeat(SplitId::Train).take(counts[0]));
    bands.extend(std::iter::repeat(SplitId::Buffer).take(buffer));
    bands.extend(std::iter::repeat(SplitId::Val).take(counts[1]));
    bands.extend(std::iter::repeat(SplitId::Buffer).take(buffer));
    bands.extend(std::iter::repeat(SplitId::Test).take(counts[2]));
    debug_assert_eq!(bands.len(), cols);
    Ok(bands)
}

/// Generates `num_tiles` tiles under `out_dir` and returns the opened
/// dataset. Layout:
///
/// ```text
/// out_dir/manifest.json
/// out_dir/taxonomy.json
/// out_dir/samples/tile_RR_CC.tseg   (T, 3, H, W) f32
/// out_dir/samples/tile_RR_CC.pgm    species labels, 255 background
/// ```
pub fn generate_dataset(
    out_dir: &Path,
    scene: &SceneSpec,
    sigs: &[SpeciesSignature],
    tags: &[String],
    num_tiles: usize,
    seed: u64,
) -> Result<Dataset> {
    let (pa, pb) = validate_inputs(scene, sigs)?;
    let t_steps = sigs[0].rgb_by_step.len();
    if tags.len() != t_steps {
        return Err(Error::invalid(format!(
            "{} time step tags for {t_steps} steps",
            tags.len()
        )));
    }
    if num_tiles == 0 {
        return Err(Error::invalid("num_tiles is zero"));
    }
    let taxonomy = taxonomy_from_signatures(sigs)?;
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let rows = (num_tiles as f64).sqrt() as usize;
    let rows = rows.max(1);
    let cols = num_tiles.div_ceil(rows);
    let schedule = proportional_schedule(&scene.species_weights, num_tiles * scene.crowns_per_tile);

    let mut samples = Vec::with_capacity(num_tiles);
    for i in 0..num_tiles {
        let (row, col) = (i / cols, i % cols);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TILE_STREAM, i as u64]));
        let slots = &schedule[i * scene.crowns_per_tile..(i + 1) * scene.crowns_per_tile];
        let (mask, crown_species, image) = render_tile(scene, sigs, slots, &mut rng);
        let id = format!("tile_{row:02}_{col:02}");
        let image_file = format!("samples/{id}.tseg");
        let mask_file = format!("samples/{id}.pgm");
        write_tensor(&out_dir.join(&image_file), &image)?;
        write_pgm(&out_dir.join(&mask_file), &mask)?;
        samples.push(SampleRecord {
            id,
            row,
            col,
            split: None,
            image_file,
            mask_file,
            crown_species,
        });
    }

    let manifest = Manifest {
        format_version: 1,
        seed,
        grid_rows: rows,
        grid_cols: cols,
        tile_height: scene.height,
        tile_width: scene.width,
        time_steps: t_steps,
        reference_time_index: REFERENCE_TIME_INDEX,
        time_step_tags: tags.to_vec(),
        confusable_pair: [sigs[pa].name.clone(), sigs[pb].name.clone()],
        species: taxonomy.species_names(),
        samples,
    };
    write_atomic(&out_dir.join("taxonomy.json"), taxonomy.to_json_string().as_bytes())?;
    write_json_atomic(&out_dir.join("manifest.json"), &manifest)?;
    Dataset::open(out_dir)
}

/// Drops species with fewer than `min_count` crowns across the dataset:
/// their mask pixels become ignore, labels are renumbered, and the
/// taxonomy, manifest, and mask files are rewritten in place. Returns the
/// removed names.
pub fn filter_rare_classes(ds: &mut Dataset, min_count: usize) -> Result<Vec<String>> {
    let mut counts = vec![0usize; ds.taxonomy.num_species()];
    for rec in &ds.manifest.samples {
        for &s in &rec.crown_species {
            if s >= counts.len() {
                return Err(Error::invalid(format!(
                    "crown record in {} names species {s}, only {} exist",
                    rec.id,
                    counts.len()
                )));
            }
            counts[s] += 1;
        }
    }
    let remove: Vec<bool> = counts.iter().map(|&c| c < min_count).collect();
    if !remove.contains(&true) {
        return Ok(Vec::new());
    }
    let removed_names: Vec<String> = ds
        .taxonomy
        .species()
        .iter()
        .zip(&remove)
        .filter(|(_, &r)| r)
        .map(|(s, _)| s.name.clone())
        .collect();
    for name in &ds.manifest.confusable_pair {
        if removed_names.contains(name) {
            return Err(Error::invalid(format!(
                "filtering would drop confusable species {name}; lower the threshold"
            )));
        }
    }
    let (pruned, remap) = ds.taxonomy.prune(&remove)?;

    for rec in &mut ds.manifest.samples {
        let path = ds.root.join(&rec.mask_file);
        let mut mask = read_pgm(&path)?;
        for v in &mut mask.data {
            if *v != IGNORE {
                *v = match remap[*v as usize] {
                    Some(new) => new as u8,
                    None => IGNORE,
                };
            }
        }
        write_pgm(&path, &mask)?;
        rec.crown_species = rec
            .crown_species
            .iter()
            .filter_map(|&s| remap[s])
            .collect();
    }
    ds.manifest.species = pruned.species_names();
    ds.taxonomy = pruned;
    write_atomic(
        &ds.root.join("taxonomy.json"),
        ds.taxonomy.to_json_string().as_bytes(),
    )?;
    ds.save_manifest()?;
    Ok(removed_names)
}

/// One of the eight square symmetries: bit 2 mirrors columns first, the
/// low two bits then apply that many quarter turns.
pub fn apply_symmetry(image: &Tensor<f32>, mask: &Mask, sym: u8) -> Result<(Tensor<f32>, Mask)> {
    debug_assert!(sym < 8);
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(Error::invalid(format!(
            "augmentation wants spatial trailing dims, image is {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if (h, w) != (mask.h, mask.w) {
        return Err(Error::invalid(format!(
            "image planes are {h}x{w}, mask is {}x{}",
            mask.h, mask.w
        )));
    }
    if h != w && sym & 1 == 1 {
        return Err(Error::invalid(format!(
            "quarter turns need square tiles, got {h}x{w}"
        )));
    }

    // positions[src] = where that pixel lands
    let mut positions: Vec<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).collect();
    let (mut ch, mut cw) = (h, w);
    if sym >> 2 == 1 {
        for p in &mut positions {
            p.1 = cw - 1 - p.1;
        }
    }
    for _ in 0..(sym & 3) {
        for p in &mut positions {
            *p = (p.1, ch - 1 - p.0);
        }
        std::mem::swap(&mut ch, &mut cw);
    }
    let mut map = vec![0usize; h * w];
    for (src, &(r, c)) in positions.iter().enumerate() {
        map[r * cw + c] = src;
    }

    let planes = image.numel() / (h * w);
    let mut data = Vec::with_capacity(image.numel());
    for p in 0..planes {
        let plane = &image.data()[p * h * w..(p + 1) * h * w];
        data.extend(map.iter().map(|&src| plane[src]));
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = ch;
    out_shape[n - 1] = cw;
    let image = Tensor::new(out_shape, data).expect("same element count");
    let mask = Mask::new(ch, cw, map.iter().map(|&src| mask.data[src]).collect())?;
    Ok((image, mask))
}

/// Random square symmetry, all eight equally likely.
pub fn augment(image: &Tensor<f32>, mask: &Mask, rng: &mut impl Rng) -> Result<(Tensor<f32>, Mask)> {
    apply_symmetry(image, mask, rng.gen_range(0..8))
}

/// How to pick frames out of a longer acquisition series.
#[derive(Copy, Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TimestepPolicy {
    /// Keep every frame as is.
    Identity,
    /// First June pass, the first two September passes, first October
    /// pass: the canonical four-step stack.
    JuneTwoSeptemberOctober,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectedTimesteps {
    pub indices: Vec<usize>,
    /// Position of the reference frame inside `indices`.
    pub reference_position: usize,
}

/// Applies `policy` to date tags formatted `YYYY-MM-DD`.
pub fn select_timesteps(tags: &[String], policy: TimestepPolicy) -> Result<SelectedTimesteps> {
    match policy {
        TimestepPolicy::Identity => {
            if tags.len() <= REFERENCE_TIME_INDEX {
                return Err(Error::invalid(format!(
                    "{} frames cannot hold a reference frame at index {REFERENCE_TIME_INDEX}",
                    tags.len()
                )));
            }
            Ok(SelectedTimesteps {
                indices: (0..tags.len()).collect(),
                reference_position: REFERENCE_TIME_INDEX,
            })
        }
        TimestepPolicy::JuneTwoSeptemberOctober => {
            let mut months = Vec::with_capacity(tags.len());
            for tag in tags {
                let month: Option<u32> = tag.get(5..7).and_then(|m| m.parse().ok());
                let month = month.filter(|m| (1..=12).contains(m)).ok_or_else(|| {
                    Error::invalid(format!("time tag {tag:?} is not YYYY-MM-DD"))
                })?;
                months.push(month);
            }
            let nth = |month: u32, skip: usize| {
                months
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m == month)
                    .nth(skip)
                    .map(|(i, _)| i)
            };
            let picks = [
                ("June", nth(6, 0)),
                ("first September", nth(9, 0)),
                ("second September", nth(9, 1)),
                ("October", nth(10, 0)),
            ];
            let missing: Vec<&str> = picks
                .iter()
                .filter(|(_, i)| i.is_none())
                .map(|(n, _)| *n)
                .collect();
            if !missing.is_empty() {
                return Err(Error::invalid(format!(
                    "series lacks a {} pass",
                    missing.join(", ")
                )));
            }
            let indices: Vec<usize> = picks.iter().map(|(_, i)| i.unwrap()).collect();
            if !indices.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::invalid(format!(
                    "selected frames {indices:?} are not in chronological order"
                )));
            }
            Ok(SelectedTimesteps {
                indices,
                reference_position: 2,
            })
        }
    }
}

/// Accuracy of a nearest-centroid classifier separating the confusable
/// pair from single-frame colors at `time_index`. Two-fold cross-fit by
/// tile parity, so the centroids never see the pixels they classify.
/// Near 0.5 at the reference frame, high once the pair diverges.
pub fn confusable_probe_accuracy(ds: &Dataset, time_index: usize) -> Result<f64> {
    let m = &ds.manifest;
    if time_index >= m.time_steps {
        return Err(Error::invalid(format!(
            "time index {time_index} outside the {} steps",
            m.time_steps
        )));
    }
    let mut ids = [0usize; 2];
    for (k, name) in m.confusable_pair.iter().enumerate() {
        ids[k] = ds
            .taxonomy
            .species_id(name)
            .ok_or_else(|| Error::invalid(format!("confusable species {name} is unknown")))?;
    }

    let mut sums = [[[0.0f64; 3]; 2]; 2]; // [tile parity][class][channel]
    let mut counts = [[0usize; 2]; 2];
    let mut pixels: Vec<(usize, usize, [f64; 3])> = Vec::new();
    let plane = m.tile_height * m.tile_width;
    for idx in 0..ds.len() {
        let fold = idx % 2;
        let (img, mask) = ds.load_sample(idx)?;
        let frame = &img.data()[time_index * 3 * plane..(time_index + 1) * 3 * plane];
        for (px, &v) in mask.data.iter().enumerate() {
            let Some(k) = ids.iter().position(|&id| id == v as usize) else {
                continue;
            };
            let rgb = [0, 1, 2].map(|ch| frame[ch * plane + px] as f64);
            for ch in 0..3 {
                sums[fold][k][ch] += rgb[ch];
            }
            counts[fold][k] += 1;
            pixels.push((fold, k, rgb));
        }
    }
    for fold in 0..2 {
        for (k, &n) in counts[fold].iter().enumerate() {
            if n == 0 {
                return Err(Error::invalid(format!(
                    "confusable species {} has no labeled pixels in one half of the tiles",
                    m.confusable_pair[k]
                )));
            }
        }
    }
    // centroids[f] is fitted on the opposite fold
    let centroids: [[[f64; 3]; 2]; 2] = [0, 1].map(|f| {
        [0, 1].map(|k| sums[1 - f][k].map(|s| s / counts[1 - f][k] as f64))
    });
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| {
        (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>()
    };
    let correct = pixels
        .iter()
        .filter(|(fold, k, rgb)| {
            let c = &centroids[*fold];
            let nearest = usize::from(dist2(rgb, &c[0]) > dist2(rgb, &c[1]));
            nearest == *k
        })
        .count();
    Ok(correct as f64 / pixels.len() as f64)
}
