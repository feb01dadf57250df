//! Segmentation losses over per-pixel class probabilities.
//!
//! Every loss takes probabilities (softmax output), not logits, because the
//! coarser hierarchy levels are probability group-sums of the species level.
//! Pixels labeled [`IGNORE`](crate::mask::IGNORE) contribute nothing to any
//! term. Logs are clamped at [`LOG_CLAMP`] with zero gradient below the
//! clamp.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpImpl};
use crate::mask::{MaskBatch, IGNORE};
use crate::taxonomy::{group_sum_backward, group_sum_channels, Level, Taxonomy};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const LOG_CLAMP: f64 = 1e-12;

/// Per-level weights of the hierarchical loss, species first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for HierarchyWeights {
    fn default() -> Self {
        HierarchyWeights {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 0.1,
        }
    }
}

/// Divisor convention for cross entropy sums.
///
/// `ByClasses` divides the summed negative log likelihood by the class count
/// at the level being scored; `ByPixels` divides by the number of labeled
/// pixels. `ByPixels` keeps magnitudes comparable across batch sizes and is
/// the training default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    ByClasses,
    ByPixels,
}

/// A built loss node plus the scalar values of its parts at build time.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: NodeId,
    pub components: Vec<(String, f64)>,
}

fn check_probs_vs_labels<E: Element>(
    op: &'static str,
    probs: &Tensor<E>,
    labels: &MaskBatch,
) -> Result<usize> {
    let s = probs.shape();
    if probs.rank() != 4 {
        return Err(Error::BadShape {
            op,
            shape: s.to_vec(),
            reason: "want probabilities shaped (N, C, H, W)".into(),
        });
    }
    if s[0] != labels.n || s[2] != labels.h || s[3] != labels.w {
        return Err(Error::BadShape {
            op,
            shape: s.to_vec(),
            reason: format!(
                "labels are ({}, {}, {})",
                labels.n, labels.h, labels.w
            ),
        });
    }
    labels.check_ids(s[1])?;
    Ok(s[1])
}

// ---- masked negative log likelihood over a log-probability node ----

#[derive(Debug)]
struct MaskedNllOp {
    targets: Arc<MaskBatch>,
    divisor: f64,
}

impl MaskedNllOp {
    fn forward<E: Element>(&self, logp: &Tensor<E>) -> E {
        let c = logp.shape()[1];
        let hw = self.targets.h * self.targets.w;
        let d = logp.data();
        let mut acc = E::zero();
        for (i, &y) in self.targets.data.iter().enumerate() {
            if y == IGNORE {
                continue;
            }
            let (n, px) = (i / hw, i % hw);
            acc += d[(n * c + y as usize) * hw + px];
        }
        -acc / E::from_f64(self.divisor)
    }
}

impl<E: Element> OpImpl<E> for MaskedNllOp {
    fn name(&self) -> &'static str {
        "masked_nll"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let logp = inputs[0];
            let c = logp.shape()[1];
            let hw = self.targets.h * self.targets.w;
            let scale = -grad_out[0] / E::from_f64(self.divisor);
            let mut dx = vec![E::zero(); logp.numel()];
            for (i, &y) in self.targets.data.iter().enumerate() {
                if y == IGNORE {
                    continue;
                }
                let (n, px) = (i / hw, i % hw);
                dx[(n * c + y as usize) * hw + px] = scale;
            }
            dx
        })]
    }
}

/// Cross entropy of `probs` (N, C, H, W) against integer labels, skipping
/// ignored pixels. Errors if every pixel is ignored.
pub fn cross_entropy<E: Element>(
    g: &mut Graph<E>,
    probs: NodeId,
    labels: &MaskBatch,
    norm: Normalization,
) -> Result<NodeId> {
    let c = check_probs_vs_labels("cross_entropy", g.value(probs), labels)?;
    let valid = labels.valid_count();
    if valid == 0 {
        return Err(Error::invalid("cross_entropy: every pixel is ignored"));
    }
    let divisor = match norm {
        Normalization::ByClasses => c as f64,
        Normalization::ByPixels => valid as f64,
    };
    let logp = g.log_clamped(probs, LOG_CLAMP);
    let op = MaskedNllOp {
        targets: Arc::new(labels.clone()),
        divisor,
    };
    let out = Tensor::scalar(op.forward(g.value(logp)));
    Ok(g.push(Box::new(op), vec![logp], out))
}

// ---- channel group sum as a graph op ----

#[derive(Debug)]
struct GroupSumOp {
    map: Arc<Vec<usize>>,
    groups: usize,
    axis: usize,
}

impl<E: Element> OpImpl<E> for GroupSumOp {
    fn name(&self) -> &'static str {
        "group_sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            group_sum_backward(grad_out, inputs[0].shape(), self.axis, &self.map, self.groups)
        })]
    }
}

/// Sums probability channels into groups along `axis`.
pub fn group_sum<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    map: Arc<Vec<usize>>,
    groups: usize,
    axis: usize,
) -> Result<NodeId> {
    let t = g.value(x);
    if axis >= t.rank() || t.shape()[axis] != map.len() {
        return Err(Error::BadShape {
            op: "group_sum",
            shape: t.shape().to_vec(),
            reason: format!("axis {axis} must have {} channels", map.len()),
        });
    }
    if let Some(&bad) = map.iter().find(|&&gid| gid >= groups) {
        return Err(Error::invalid(format!(
            "group_sum map entry {bad} exceeds group count {groups}"
        )));
    }
    let out = group_sum_channels(t, axis, &map, groups);
    Ok(g.push(Box::new(GroupSumOp { map, groups, axis }), vec![x], out))
}

/// Weighted sum of cross entropies at the species, genus, and taxon levels.
///
/// `probs` must be species-level probabilities (N, S, H, W); coarser levels
/// are derived inside the graph by group-summing channels, taxon from genus.
/// Component values are reported unweighted.
pub fn hierarchical_loss<E: Element>(
    g: &mut Graph<E>,
    probs: NodeId,
    labels: &MaskBatch,
    taxonomy: &Taxonomy,
    weights: &HierarchyWeights,
    norm: Normalization,
) -> Result<LossValue> {
    let s = check_probs_vs_labels("hierarchical_loss", g.value(probs), labels)?;
    if s != taxonomy.num_species() {
        return Err(Error::BadShape {
            op: "hierarchical_loss",
            shape: g.value(probs).shape().to_vec(),
            reason: format!("taxonomy has {} species", taxonomy.num_species()),
        });
    }

    let ls = cross_entropy(g, probs, labels, norm)?;

    let genus_probs = group_sum(
        g,
        probs,
        Arc::new(taxonomy.species_to_genus()),
        taxonomy.num_genera(),
        1,
    )?;
    let genus_labels = taxonomy.aggregate_labels(labels, Level::Genus)?;
    let lg = cross_entropy(g, genus_probs, &genus_labels, norm)?;

    let taxon_probs = group_sum(
        g,
        genus_probs,
        Arc::new(taxonomy.genus_to_taxon()),
        taxonomy.num_taxa(),
        1,
    )?;
    let taxon_labels = taxonomy.aggregate_labels(labels, Level::Taxon)?;
    let lt = cross_entropy(g, taxon_probs, &taxon_labels, norm)?;

    let components = vec![
        ("species".to_string(), g.value(ls).item()?.as_f64()),
        ("genus".to_string(), g.value(lg).item()?.as_f64()),
        ("taxon".to_string(), g.value(lt).item()?.as_f64()),
    ];

    let ws = g.scale(ls, weights.lambda1);
    let wg = g.scale(lg, weights.lambda2);
    let wt = g.scale(lt, weights.lambda3);
    let tail = g.add(wg, wt)?;
    let total = g.add(ws, tail)?;
    Ok(LossValue { total, components })
}

// ---- soft Dice ----

#[derive(Debug)]
struct SoftDiceOp {
    targets: Arc<MaskBatch>,
    eps: f64,
}

struct DiceSums {
    /// Classes with at least one labeled pixel.
    present: Vec<usize>,
    /// Per present class: (intersection, prob sum + label sum).
    sums: Vec<(f64, f64)>,
}

impl SoftDiceOp {
    fn sums<E: Element>(&self, probs: &Tensor<E>) -> DiceSums {
        let c = probs.shape()[1];
        let hw = self.targets.h * self.targets.w;
        let d = probs.data();
        let mut inter = vec![0.0f64; c];
        let mut psum = vec![0.0f64; c];
        let mut ysum = vec![0.0f64; c];
        let mut seen = vec![false; c];
        for (i, &y) in self.targets.data.iter().enumerate() {
            if y == IGNORE {
                continue;
            }
            let (n, px) = (i / hw, i % hw);
            let yc = y as usize;
            seen[yc] = true;
            ysum[yc] += 1.0;
            for cc in 0..c {
                let p = d[(n * c + cc) * hw + px].as_f64();
                psum[cc] += p;
                if cc == yc {
                    inter[cc] += p;
                }
            }
        }
        let present: Vec<usize> = (0..c).filter(|&cc| seen[cc]).collect();
        let sums = present
            .iter()
            .map(|&cc| (inter[cc], psum[cc] + ysum[cc]))
            .collect();
        DiceSums { present, sums }
    }

    fn forward<E: Element>(&self, probs: &Tensor<E>) -> f64 {
        let s = self.sums(probs);
        let k = s.present.len() as f64;
        s.sums
            .iter()
            .map(|&(i, u)| 1.0 - (2.0 * i + self.eps) / (u + self.eps))
            .sum::<f64>()
            / k
    }
}

impl<E: Element> OpImpl<E> for SoftDiceOp {
    fn name(&self) -> &'static str {
        "soft_dice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let probs = inputs[0];
            let c = probs.shape()[1];
            let hw = self.targets.h * self.targets.w;
            let s = self.sums(probs);
            let k = s.present.len() as f64;
            let g0 = grad_out[0].as_f64();
            // per-class constants of d/dp: -(2y(U+e) - (2I+e)) / (U+e)^2 / K
            let mut when_y = vec![0.0f64; c];
            let mut when_not = vec![0.0f64; c];
            for (&cc, &(i, u)) in s.present.iter().zip(&s.sums) {
                let ue = u + self.eps;
                let num = 2.0 * i + self.eps;
                when_y[cc] = -(2.0 * ue - num) / (ue * ue) / k * g0;
                when_not[cc] = num / (ue * ue) / k * g0;
            }
            let mut dx = vec![E::zero(); probs.numel()];
            for (ix, &y) in self.targets.data.iter().enumerate() {
                if y == IGNORE {
                    continue;
                }
                let (n, px) = (ix / hw, ix % hw);
                for &cc in &s.present {
                    let v = if cc == y as usize { when_y[cc] } else { when_not[cc] };
                    dx[(n * c + cc) * hw + px] = E::from_f64(v);
                }
            }
            dx
        })]
    }
}

/// Soft Dice loss, averaged over the classes that appear in the labels.
/// Per class: 1 - (2*intersection + eps) / (prob sum + label sum + eps).
pub fn dice_loss<E: Element>(
    g: &mut Graph<E>,
    probs: NodeId,
    labels: &MaskBatch,
    eps: f64,
) -> Result<NodeId> {
    check_probs_vs_labels("dice_loss", g.value(probs), labels)?;
    if labels.valid_count() == 0 {
        return Err(Error::invalid("dice_loss: every pixel is ignored"));
    }
    let op = SoftDiceOp {
        targets: Arc::new(labels.clone()),
        eps,
    };
    let out = Tensor::scalar(E::from_f64(op.forward(g.value(probs))));
    Ok(g.push(Box::new(op), vec![probs], out))
}

/// Dice plus pixel-normalized cross entropy, equally weighted.
pub fn dice_ce_loss<E: Element>(
    g: &mut Graph<E>,
    probs: NodeId,
    labels: &MaskBatch,
) -> Result<LossValue> {
    let dice = dice_loss(g, probs, labels, 1.0)?;
    let ce = cross_entropy(g, probs, labels, Normalization::ByPixels)?;
    let components = vec![
        ("dice".to_string(), g.value(dice).item()?.as_f64()),
        ("ce".to_string(), g.value(ce).item()?.as_f64()),
    ];
    let total = g.add(dice, ce)?;
    Ok(LossValue { total, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradCheckConfig};
    use crate::mask::Mask;
    use crate::nn::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FLAT: &str = r#"{
        "species": [
            {"name": "s0", "genus": "g0"},
            {"name": "s1", "genus": "g0"},
            {"name": "s2", "genus": "g1"},
            {"name": "s3", "genus": "g1"}
        ],
        "genera": [
            {"name": "g0", "taxon": "t"},
            {"name": "g1", "taxon": "t"}
        ]
    }"#;

    fn tax4() -> Taxonomy {
        Taxonomy::from_json_str(FLAT).unwrap()
    }

    fn uniform_pixel() -> (Tensor<f64>, MaskBatch) {
        let probs = Tensor::from_f64s(&[1, 4, 1, 1], &[0.25; 4]).unwrap();
        let labels = MaskBatch::from_masks(&[Mask::new(1, 1, vec![0]).unwrap()]).unwrap();
        (probs, labels)
    }

    #[test]
    fn uniform_ce_matches_closed_form() {
        let (probs, labels) = uniform_pixel();
        let mut g = Graph::new();
        let p = g.constant(probs);
        let by_c = cross_entropy(&mut g, p, &labels, Normalization::ByClasses).unwrap();
        let by_p = cross_entropy(&mut g, p, &labels, Normalization::ByPixels).unwrap();
        let ln4 = 4.0f64.ln();
        assert!((g.value(by_c).item().unwrap() - ln4 / 4.0).abs() < 1e-12);
        assert!((g.value(by_p).item().unwrap() - ln4).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_uniform_pixel_matches_closed_form() {
        let (probs, labels) = uniform_pixel();
        let mut g = Graph::new();
        let p = g.constant(probs);
        let loss = hierarchical_loss(
            &mut g,
            p,
            &labels,
            &tax4(),
            &HierarchyWeights::default(),
            Normalization::ByClasses,
        )
        .unwrap();
        let total = g.value(loss.total).item().unwrap();
        assert!((total - 0.45054566736396443).abs() < 1e-12, "{total}");
        assert!((loss.components[0].1 - 4.0f64.ln() / 4.0).abs() < 1e-12);
        assert!((loss.components[1].1 - 2.0f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(loss.components[2].1, 0.0);
    }

    #[test]
    fn species_only_weights_reduce_to_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probs = random_simplex(&mut rng, 2, 4, 3, 3);
        let labels = random_labels(&mut rng, 2, 3, 3, 4);
        let w = HierarchyWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let h = hierarchical_loss(&mut g, p, &labels, &tax4(), &w, Normalization::ByPixels).unwrap();
        let mut g2 = Graph::new();
        let p2 = g2.constant(probs);
        let ce = cross_entropy(&mut g2, p2, &labels, Normalization::ByPixels).unwrap();
        assert_eq!(
            g.value(h.total).item().unwrap(),
            g2.value(ce).item().unwrap()
        );
    }

    #[test]
    fn ignored_pixels_change_nothing() {
        let probs: Tensor<f64> = Tensor::from_f64s(
            &[1, 4, 1, 2],
            &[0.25, 0.7, 0.25, 0.1, 0.25, 0.1, 0.25, 0.1],
        )
        .unwrap();
        let only = MaskBatch::from_masks(&[Mask::new(1, 2, vec![0, IGNORE]).unwrap()]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(probs);
        let ce = cross_entropy(&mut g, p, &only, Normalization::ByPixels).unwrap();
        assert!((g.value(ce).item().unwrap() - (-0.25f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let probs: Tensor<f64> = Tensor::from_f64s(&[1, 4, 1, 1], &[0.25; 4]).unwrap();
        let labels = MaskBatch::from_masks(&[Mask::new(1, 1, vec![IGNORE]).unwrap()]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        assert!(cross_entropy(&mut g, p, &labels, Normalization::ByPixels).is_err());
        let mut g2 = Graph::new();
        let p2 = g2.constant(probs);
        assert!(dice_loss(&mut g2, p2, &labels, 1.0).is_err());
    }

    #[test]
    fn dice_half_overlap_matches_closed_form() {
        // 8 pixels all labeled class 0; prediction puts mass 1 on class 0 for
        // 4 of them and on class 1 elsewhere: I = 4, U = 4 + 8.
        let mut data = vec![0.0f64; 2 * 8];
        for px in 0..8 {
            if px < 4 {
                data[px] = 1.0;
            } else {
                data[8 + px] = 1.0;
            }
        }
        let probs = Tensor::new(vec![1, 2, 2, 4], data).unwrap();
        let labels = MaskBatch::from_masks(&[Mask::filled(2, 4, 0)]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(probs);
        let d = dice_loss(&mut g, p, &labels, 1.0).unwrap();
        let expect = 1.0 - (2.0 * 4.0 + 1.0) / (12.0 + 1.0);
        assert!((g.value(d).item().unwrap() - expect).abs() < 1e-12);
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut data = vec![0.0f64; n * c * h * w];
        let hw = h * w;
        for b in 0..n {
            for px in 0..hw {
                let mut sum = 0.0;
                let mut vals = vec![0.0; c];
                for v in vals.iter_mut() {
                    *v = rand::Rng::gen_range(rng, 0.05..1.0);
                    sum += *v;
                }
                for (cc, v) in vals.iter().enumerate() {
                    data[(b * c + cc) * hw + px] = v / sum;
                }
            }
        }
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> MaskBatch {
        let masks: Vec<Mask> = (0..n)
            .map(|_| {
                let data = (0..h * w)
                    .map(|_| rand::Rng::gen_range(rng, 0..c as u8))
                    .collect();
                Mask::new(h, w, data).unwrap()
            })
            .collect();
        MaskBatch::from_masks(&masks).unwrap()
    }

    fn loss_gradcheck<F>(seed: u64, tolerance: f64, build: F)
    where
        F: Fn(&mut Graph<f64>, NodeId) -> crate::error::Result<NodeId>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = random_simplex(&mut rng, 1, 4, 3, 3);
        let mut params = ParamSet::new();
        params.insert("probs", probs).unwrap();
        let cfg = GradCheckConfig {
            samples: 16,
            seed,
            tolerance,
            ..Default::default()
        };
        let report = gradcheck(&cfg, &params, |ps, want| {
            let mut g = Graph::new();
            let p = g.leaf(ps.get("probs").unwrap().clone());
            let loss = build(&mut g, p)?;
            let lv = g.value(loss).item()?;
            if !want {
                return Ok((lv, None));
            }
            g.backward(loss)?;
            Ok((lv, Some(vec![g.take_grad(p).unwrap()])))
        })
        .unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let labels = random_labels(&mut rng, 1, 3, 3, 4);
        loss_gradcheck(31, 1e-4, move |g, p| {
            cross_entropy(g, p, &labels, Normalization::ByPixels)
        });
    }

    #[test]
    fn hierarchical_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let labels = random_labels(&mut rng, 1, 3, 3, 4);
        let tax = tax4();
        loss_gradcheck(32, 1e-4, move |g, p| {
            Ok(hierarchical_loss(
                g,
                p,
                &labels,
                &tax,
                &HierarchyWeights::default(),
                Normalization::ByClasses,
            )?
            .total)
        });
    }

    #[test]
    fn dice_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut labels = random_labels(&mut rng, 1, 3, 3, 4);
        labels.data[4] = IGNORE;
        loss_gradcheck(33, 1e-4, move |g, p| dice_loss(g, p, &labels, 1.0));
    }

    #[test]
    fn dice_ce_totals_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let probs = random_simplex(&mut rng, 1, 4, 3, 3);
        let labels = random_labels(&mut rng, 1, 3, 3, 4);
        let mut g = Graph::new();
        let p = g.constant(probs);
        let lv = dice_ce_loss(&mut g, p, &labels).unwrap();
        let total = g.value(lv.total).item().unwrap();
        assert!((total - (lv.components[0].1 + lv.components[1].1)).abs() < 1e-15);
    }

    #[test]
    fn softmax_composite_gradients_match_finite_differences() {
        // the path training takes: logits -> softmax -> hierarchical loss
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let logits = Tensor::rand_uniform(&[1, 4, 3, 3], -2.0, 2.0, &mut rng);
        let labels = random_labels(&mut rng, 1, 3, 3, 4);
        let tax = tax4();
        let mut params = ParamSet::new();
        params.insert("logits", logits).unwrap();
        let cfg = GradCheckConfig {
            samples: 16,
            seed: 35,
            tolerance: 1e-3,
            ..Default::default()
        };
        let report = gradcheck(&cfg, &params, |ps, want| {
            let mut g = Graph::new();
            let z = g.leaf(ps.get("logits").unwrap().clone());
            let p = g.softmax(z, 1)?;
            let loss = hierarchical_loss(
                &mut g,
                p,
                &labels,
                &tax,
                &HierarchyWeights::default(),
                Normalization::ByPixels,
            )?;
            let lv = g.value(loss.total).item()?;
            if !want {
                return Ok((lv, None));
            }
            g.backward(loss.total)?;
            Ok((lv, Some(vec![g.take_grad(z).unwrap()])))
        })
        .unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);
    }
}
