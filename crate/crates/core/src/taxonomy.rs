//! Three-level class hierarchy: species grouped into genera grouped into
//! higher taxa, loaded from a JSON description.
//!
//! Species ids are indices into the file's species list; genus and taxon ids
//! follow the genera list and the order taxa first appear there. Probability
//! aggregation to coarser levels is a channel group-sum, and the taxon level
//! is defined as aggregation of the genus level so the two routes (direct or
//! via genus) are the same computation.

use crate::error::{Error, Result};
use crate::mask::{Mask, MaskBatch, IGNORE};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Species,
    Genus,
    Taxon,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Species => "species",
            Level::Genus => "genus",
            Level::Taxon => "taxon",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeciesEntry {
    name: String,
    genus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    color: Option<String>,
    /// Kept in training but flagged for exclusion in reported tables.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    report_exclude: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenusEntry {
    name: String,
    taxon: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    species: Vec<SpeciesEntry>,
    genera: Vec<GenusEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeciesInfo {
    pub name: String,
    pub genus_id: usize,
    pub color: Option<[u8; 3]>,
    pub report_exclude: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenusInfo {
    pub name: String,
    pub taxon_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    species: Vec<SpeciesInfo>,
    genera: Vec<GenusInfo>,
    taxa: Vec<String>,
}

fn parse_color(name: &str, s: &str) -> Result<[u8; 3]> {
    let hex = s.strip_prefix('#').ok_or_else(|| {
        Error::Taxonomy(format!("color for {name} must look like #RRGGBB, got {s:?}"))
    })?;
    if hex.len() != 6 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(Error::Taxonomy(format!(
            "color for {name} must look like #RRGGBB, got {s:?}"
        )));
    }
    let v = u32::from_str_radix(hex, 16).expect("validated hex");
    Ok([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

impl Taxonomy {
    pub fn from_json_str(json: &str) -> Result<Self> {
        let file: TaxonomyFile =
            serde_json::from_str(json).map_err(|e| Error::Taxonomy(format!("bad taxonomy JSON: {e}")))?;
        Self::from_file_schema(file)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Taxonomy(msg) => Error::Taxonomy(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn from_file_schema(file: TaxonomyFile) -> Result<Self> {
        let mut problems = Vec::new();
        if file.species.is_empty() {
            problems.push("species list is empty".to_string());
        }
        if file.species.len() > IGNORE as usize {
            problems.push(format!(
                "{} species exceed the {} representable ids (255 marks ignored pixels)",
                file.species.len(),
                IGNORE
            ));
        }

        let mut taxa: Vec<String> = Vec::new();
        let mut genera: Vec<GenusInfo> = Vec::new();
        for g in &file.genera {
            if g.name.is_empty() {
                problems.push("genus with empty name".to_string());
            }
            if g.taxon.is_empty() {
                problems.push(format!("genus {} has an empty taxon", g.name));
            }
            if genera.iter().any(|e| e.name == g.name) {
                problems.push(format!("duplicate genus name: {}", g.name));
                continue;
            }
            let taxon_id = match taxa.iter().position(|t| t == &g.taxon) {
                Some(i) => i,
                None => {
                    taxa.push(g.taxon.clone());
                    taxa.len() - 1
                }
            };
            genera.push(GenusInfo {
                name: g.name.clone(),
                taxon_id,
            });
        }

        let mut species: Vec<SpeciesInfo> = Vec::new();
        let mut referenced = vec![false; genera.len()];
        for s in &file.species {
            if s.name.is_empty() {
                problems.push("species with empty name".to_string());
            }
            if species.iter().any(|e| e.name == s.name) {
                problems.push(format!("duplicate species name: {}", s.name));
            }
            let genus_id = match genera.iter().position(|g| g.name == s.genus) {
                Some(i) => {
                    referenced[i] = true;
                    i
                }
                None => {
                    problems.push(format!("species {} names unknown genus {}", s.name, s.genus));
                    0
                }
            };
            let color = match &s.color {
                Some(c) => match parse_color(&s.name, c) {
                    Ok(rgb) => Some(rgb),
                    Err(e) => {
                        problems.push(e.to_string());
                        None
                    }
                },
                None => None,
            };
            species.push(SpeciesInfo {
                name: s.name.clone(),
                genus_id,
                color,
                report_exclude: s.report_exclude,
            });
        }
        for (g, used) in genera.iter().zip(&referenced) {
            if !used {
                problems.push(format!("genus {} has no species", g.name));
            }
        }

        if !problems.is_empty() {
            return Err(Error::Taxonomy(problems.join("; ")));
        }
        Ok(Taxonomy {
            species,
            genera,
            taxa,
        })
    }

    pub fn to_json_string(&self) -> String {
        let file = TaxonomyFile {
            species: self
                .species
                .iter()
                .map(|s| SpeciesEntry {
                    name: s.name.clone(),
                    genus: self.genera[s.genus_id].name.clone(),
                    color: s
                        .color
                        .map(|[r, g, b]| format!("#{r:02X}{g:02X}{b:02X}")),
                    report_exclude: s.report_exclude,
                })
                .collect(),
            genera: self
                .genera
                .iter()
                .map(|g| GenusEntry {
                    name: g.name.clone(),
                    taxon: self.taxa[g.taxon_id].clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    pub fn num_genera(&self) -> usize {
        self.genera.len()
    }

    pub fn num_taxa(&self) -> usize {
        self.taxa.len()
    }

    pub fn num_at(&self, level: Level) -> usize {
        match level {
            Level::Species => self.num_species(),
            Level::Genus => self.num_genera(),
            Level::Taxon => self.num_taxa(),
        }
    }

    pub fn species(&self) -> &[SpeciesInfo] {
        &self.species
    }

    pub fn genera(&self) -> &[GenusInfo] {
        &self.genera
    }

    pub fn taxa(&self) -> &[String] {
        &self.taxa
    }

    pub fn species_names(&self) -> Vec<String> {
        self.species.iter().map(|s| s.name.clone()).collect()
    }

    pub fn names_at(&self, level: Level) -> Vec<String> {
        match level {
            Level::Species => self.species_names(),
            Level::Genus => self.genera.iter().map(|g| g.name.clone()).collect(),
            Level::Taxon => self.taxa.clone(),
        }
    }

    pub fn species_id(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    /// Species id to genus id, index-aligned with the species list.
    pub fn species_to_genus(&self) -> Vec<usize> {
        self.species.iter().map(|s| s.genus_id).collect()
    }

    /// Genus id to taxon id, index-aligned with the genera list.
    pub fn genus_to_taxon(&self) -> Vec<usize> {
        self.genera.iter().map(|g| g.taxon_id).collect()
    }

    /// Species id to the id of its class at `level`.
    pub fn map_to(&self, level: Level) -> Vec<usize> {
        match level {
            Level::Species => (0..self.species.len()).collect(),
            Level::Genus => self.species_to_genus(),
            Level::Taxon => {
                let g2t = self.genus_to_taxon();
                self.species.iter().map(|s| g2t[s.genus_id]).collect()
            }
        }
    }

    /// Sums species probability channels into their group at `level`.
    /// Accepts (S, H, W) or (N, S, H, W); the channel axis is rank - 3.
    pub fn aggregate_probs<E: Element>(&self, probs: &Tensor<E>, level: Level) -> Result<Tensor<E>> {
        let axis = check_prob_shape("aggregate_probs", probs, self.num_species())?;
        debug_assert!(
            simplex_ok(probs, axis),
            "aggregate_probs input channels do not sum to 1"
        );
        match level {
            Level::Species => Ok(probs.clone()),
            Level::Genus => Ok(group_sum_channels(
                probs,
                axis,
                &self.species_to_genus(),
                self.num_genera(),
            )),
            Level::Taxon => {
                let genus = group_sum_channels(probs, axis, &self.species_to_genus(), self.num_genera());
                Ok(self.aggregate_genus_to_taxon(&genus)?)
            }
        }
    }

    /// Taxon aggregation for an input already at genus level.
    pub fn aggregate_genus_to_taxon<E: Element>(&self, genus_probs: &Tensor<E>) -> Result<Tensor<E>> {
        let axis = check_prob_shape("aggregate_genus_to_taxon", genus_probs, self.num_genera())?;
        Ok(group_sum_channels(
            genus_probs,
            axis,
            &self.genus_to_taxon(),
            self.num_taxa(),
        ))
    }

    /// Rewrites species labels as labels at `level`, preserving ignored pixels.
    pub fn aggregate_labels(&self, labels: &MaskBatch, level: Level) -> Result<MaskBatch> {
        let map = self.map_to(level);
        let mut out = labels.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            if *v == IGNORE {
                continue;
            }
            if *v as usize >= map.len() {
                let hw = labels.h * labels.w;
                return Err(Error::invalid(format!(
                    "label {v} at sample {}, pixel ({}, {}) exceeds species count {}",
                    i / hw,
                    (i % hw) / labels.w,
                    (i % hw) % labels.w,
                    map.len()
                )));
            }
            *v = map[*v as usize] as u8;
        }
        Ok(out)
    }

    pub fn aggregate_mask(&self, mask: &Mask, level: Level) -> Result<Mask> {
        let batch = MaskBatch::from_masks(std::slice::from_ref(mask))?;
        let out = self.aggregate_labels(&batch, level)?;
        Mask::new(mask.h, mask.w, out.data)
    }

    /// Drops the flagged species and every genus or taxon left without
    /// members. Returns the reduced taxonomy and the old-to-new species id
    /// map (`None` for removed ids).
    pub fn prune(&self, remove: &[bool]) -> Result<(Taxonomy, Vec<Option<usize>>)> {
        if remove.len() != self.species.len() {
            return Err(Error::invalid(format!(
                "prune flag count {} does not match species count {}",
                remove.len(),
                self.species.len()
            )));
        }
        if remove.iter().all(|&r| r) {
            return Err(Error::Taxonomy("prune would remove every species".into()));
        }
        let file = TaxonomyFile {
            species: self
                .species
                .iter()
                .zip(remove)
                .filter(|(_, &r)| !r)
                .map(|(s, _)| SpeciesEntry {
                    name: s.name.clone(),
                    genus: self.genera[s.genus_id].name.clone(),
                    color: s.color.map(|[r, g, b]| format!("#{r:02X}{g:02X}{b:02X}")),
                    report_exclude: s.report_exclude,
                })
                .collect(),
            genera: self
                .genera
                .iter()
                .enumerate()
                .filter(|(gi, _)| {
                    self.species
                        .iter()
                        .zip(remove)
                        .any(|(s, &r)| !r && s.genus_id == *gi)
                })
                .map(|(_, g)| GenusEntry {
                    name: g.name.clone(),
                    taxon: self.taxa[g.taxon_id].clone(),
                })
                .collect(),
        };
        let pruned = Self::from_file_schema(file)?;
        let mut map = Vec::with_capacity(self.species.len());
        let mut next = 0usize;
        for &r in remove {
            if r {
                map.push(None);
            } else {
                map.push(Some(next));
                next += 1;
            }
        }
        Ok((pruned, map))
    }
}

fn check_prob_shape<E: Element>(op: &'static str, t: &Tensor<E>, channels: usize) -> Result<usize> {
    let r = t.rank();
    if !(3..=4).contains(&r) || t.shape()[r - 3] != channels {
        return Err(Error::BadShape {
            op,
            shape: t.shape().to_vec(),
            reason: format!("want ({channels}, H, W) or (N, {channels}, H, W)"),
        });
    }
    Ok(r - 3)
}

#[cfg(debug_assertions)]
fn simplex_ok<E: Element>(t: &Tensor<E>, axis: usize) -> bool {
    let (outer, c, inner) = crate::graph::axis_split(t.shape(), axis);
    for o in 0..outer {
        for i in 0..inner {
            let mut sum = 0.0f64;
            for j in 0..c {
                let v = t.data()[(o * c + j) * inner + i].as_f64();
                if v < -1e-6 {
                    return false;
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-3 {
                return false;
            }
        }
    }
    true
}

#[cfg(not(debug_assertions))]
fn simplex_ok<E: Element>(_t: &Tensor<E>, _axis: usize) -> bool {
    true
}

/// Sums channels of `t` into `groups` output channels along `axis` using
/// `map[channel] = group`. Contributions are added in ascending channel
/// order, so results are reproducible bit for bit.
pub(crate) fn group_sum_channels<E: Element>(
    t: &Tensor<E>,
    axis: usize,
    map: &[usize],
    groups: usize,
) -> Tensor<E> {
    let (outer, c, inner) = crate::graph::axis_split(t.shape(), axis);
    debug_assert_eq!(c, map.len());
    let mut shape = t.shape().to_vec();
    shape[axis] = groups;
    let mut out = vec![E::zero(); outer * groups * inner];
    let src = t.data();
    for o in 0..outer {
        for (s, &g) in map.iter().enumerate() {
            let src_row = &src[(o * c + s) * inner..(o * c + s + 1) * inner];
            let dst_row = &mut out[(o * groups + g) * inner..(o * groups + g + 1) * inner];
            for (d, v) in dst_row.iter_mut().zip(src_row) {
                *d += *v;
            }
        }
    }
    Tensor::new(shape, out).expect("group sum preserves layout")
}

/// Backward of [`group_sum_channels`]: each channel reads its group's grad.
pub(crate) fn group_sum_backward<E: Element>(
    grad_out: &[E],
    in_shape: &[usize],
    axis: usize,
    map: &[usize],
    groups: usize,
) -> Vec<E> {
    let (outer, c, inner) = crate::graph::axis_split(in_shape, axis);
    let mut dx = vec![E::zero(); outer * c * inner];
    for o in 0..outer {
        for (s, &g) in map.iter().enumerate() {
            let src = &grad_out[(o * groups + g) * inner..(o * groups + g + 1) * inner];
            let dst = &mut dx[(o * c + s) * inner..(o * c + s + 1) * inner];
            dst.copy_from_slice(src);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r##"{
        "species": [
            {"name": "ACRU", "genus": "Acer", "color": "#8E44AD"},
            {"name": "ACSA", "genus": "Acer"},
            {"name": "PIST", "genus": "Pinus"},
            {"name": "BEAL", "genus": "Betula", "report_exclude": true}
        ],
        "genera": [
            {"name": "Acer", "taxon": "broadleaf"},
            {"name": "Betula", "taxon": "broadleaf"},
            {"name": "Pinus", "taxon": "conifer"}
        ]
    }"##;

    fn small() -> Taxonomy {
        Taxonomy::from_json_str(SMALL).unwrap()
    }

    #[test]
    fn parses_and_orders_levels() {
        let t = small();
        assert_eq!(t.num_species(), 4);
        assert_eq!(t.num_genera(), 3);
        // taxa in order of first appearance in the genera list
        assert_eq!(t.taxa(), ["broadleaf", "conifer"]);
        assert_eq!(t.species_to_genus(), [0, 0, 2, 1]);
        assert_eq!(t.genus_to_taxon(), [0, 0, 1]);
        assert_eq!(t.map_to(Level::Taxon), [0, 0, 1, 0]);
        assert_eq!(t.species()[0].color, Some([0x8E, 0x44, 0xAD]));
        assert!(t.species()[3].report_exclude);
        assert!(!t.species()[0].report_exclude);
    }

    #[test]
    fn collects_every_unknown_genus() {
        let bad = r#"{
            "species": [
                {"name": "A", "genus": "Nope"},
                {"name": "B", "genus": "Missing"}
            ],
            "genera": [{"name": "Acer", "taxon": "broadleaf"}]
        }"#;
        let msg = Taxonomy::from_json_str(bad).unwrap_err().to_string();
        assert!(msg.contains("Nope") && msg.contains("Missing"), "{msg}");
        // the unreferenced genus is reported too
        assert!(msg.contains("Acer"), "{msg}");
    }

    #[test]
    fn rejects_duplicates_and_bad_colors() {
        let bad = r#"{
            "species": [
                {"name": "A", "genus": "G", "color": "8E44AD"},
                {"name": "A", "genus": "G"}
            ],
            "genera": [{"name": "G", "taxon": "t"}]
        }"#;
        let msg = Taxonomy::from_json_str(bad).unwrap_err().to_string();
        assert!(msg.contains("duplicate species"), "{msg}");
        assert!(msg.contains("#RRGGBB"), "{msg}");
    }

    #[test]
    fn rejects_too_many_species() {
        let species: Vec<String> = (0..256)
            .map(|i| format!(r#"{{"name": "S{i}", "genus": "G"}}"#))
            .collect();
        let json = format!(
            r#"{{"species": [{}], "genera": [{{"name": "G", "taxon": "t"}}]}}"#,
            species.join(",")
        );
        let msg = Taxonomy::from_json_str(&json).unwrap_err().to_string();
        assert!(msg.contains("255"), "{msg}");
    }

    #[test]
    fn aggregate_probs_sums_groups() {
        let t = small();
        // one pixel, S=4 channels
        let p: Tensor<f64> = Tensor::from_f64s(&[4, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = t.aggregate_probs(&p, Level::Genus).unwrap();
        assert_eq!(g.shape(), &[3, 1, 1]);
        assert_eq!(g.data(), &[0.1 + 0.2, 0.4, 0.3]);
        let x = t.aggregate_probs(&p, Level::Taxon).unwrap();
        assert_eq!(x.shape(), &[2, 1, 1]);
        assert_eq!(x.data(), &[(0.1 + 0.2) + 0.4, 0.3]);
    }

    #[test]
    fn taxon_aggregation_is_composition_of_genus_steps() {
        let t = small();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        // random simplexes over 4 channels at 5x4 pixels, batch of 2
        let mut data = vec![0.0f64; 2 * 4 * 5 * 4];
        for n in 0..2 {
            for px in 0..20 {
                let mut v = [0.0f64; 4];
                let mut sum = 0.0;
                for vi in v.iter_mut() {
                    *vi = rand::Rng::gen_range(&mut rng, 0.0..1.0);
                    sum += *vi;
                }
                for (s, vi) in v.iter().enumerate() {
                    data[(n * 4 + s) * 20 + px] = vi / sum;
                }
            }
        }
        let p = Tensor::new(vec![2, 4, 5, 4], data).unwrap();
        let direct = t.aggregate_probs(&p, Level::Taxon).unwrap();
        let genus = t.aggregate_probs(&p, Level::Genus).unwrap();
        let via = t.aggregate_genus_to_taxon(&genus).unwrap();
        assert_eq!(direct.data(), via.data());
    }

    #[test]
    fn aggregate_labels_preserves_ignore_and_checks_range() {
        let t = small();
        let m = Mask::new(1, 4, vec![0, 3, IGNORE, 2]).unwrap();
        let b = MaskBatch::from_masks(&[m]).unwrap();
        let g = t.aggregate_labels(&b, Level::Genus).unwrap();
        assert_eq!(g.data, vec![0, 1, IGNORE, 2]);
        let x = t.aggregate_labels(&b, Level::Taxon).unwrap();
        assert_eq!(x.data, vec![0, 0, IGNORE, 1]);

        let bad = MaskBatch::from_masks(&[Mask::new(1, 2, vec![0, 9]).unwrap()]).unwrap();
        let msg = t.aggregate_labels(&bad, Level::Genus).unwrap_err().to_string();
        assert!(msg.contains("(0, 1)"), "{msg}");
    }

    #[test]
    fn prune_drops_empty_groups_and_maps_ids() {
        let t = small();
        // drop both Acer species: genus Acer disappears, taxa reorder
        let (p, map) = t.prune(&[true, true, false, false]).unwrap();
        assert_eq!(p.num_species(), 2);
        assert_eq!(p.species_names(), ["PIST", "BEAL"]);
        assert_eq!(p.num_genera(), 2);
        assert_eq!(map, vec![None, None, Some(0), Some(1)]);
        // taxa rebuilt in first-appearance order of the surviving genera
        assert_eq!(p.taxa(), ["broadleaf", "conifer"]);
        assert_eq!(p.map_to(Level::Taxon), [1, 0]);
    }

    #[test]
    fn json_round_trip() {
        let t = small();
        let again = Taxonomy::from_json_str(&t.to_json_string()).unwrap();
        assert_eq!(t, again);
    }
}
