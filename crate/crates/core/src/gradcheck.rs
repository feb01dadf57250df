//! Finite-difference verification of analytic gradients.
//!
//! Runs in f64 only: f32 rounding alone can exceed the tolerances this is
//! meant to enforce. The evaluation closure owns graph construction so any
//! parameterized computation can be checked against the same central
//! difference, including full model+loss pipelines.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{hierarchical_loss, HierarchyWeights, Normalization};
use crate::mask::{Mask, MaskBatch, IGNORE};
use crate::models::{build_model, GraphExec, Mode, Model, ModelSpec, ProcessorSpec, TinyUNetSpec};
use crate::nn::{conv3d, xavier_uniform, ParamSet};
use crate::taxonomy::Taxonomy;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Base central difference step. Probes that fail at this step are
    /// retried with smaller ones before they count as failures.
    pub step: f64,
    /// Max allowed relative error between analytic and numeric.
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            samples: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckFinding {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error, present once anything was checked.
    pub worst: Option<GradCheckFinding>,
    /// Total coordinates probed.
    pub checked: usize,
    /// Coordinates exceeding the tolerance.
    pub failures: Vec<GradCheckFinding>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

// The floor is an absolute-error allowance: below this scale a central
// difference of a many-term loss is cancellation noise, not signal.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks analytic gradients of `eval` against central differences at
/// `cfg.samples` random coordinates of each parameter.
///
/// `eval(params, true)` must return the loss and one gradient buffer per
/// parameter in `params` order; `eval(params, false)` may skip the gradients.
/// The closure must not retain state across calls: it is invoked once for the
/// analytic pass and twice per probed coordinate.
pub fn gradcheck<F>(cfg: &GradCheckConfig, params: &ParamSet<f64>, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>, bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>,
{
    if cfg.samples == 0 {
        return Err(Error::invalid("gradcheck needs samples > 0"));
    }
    let (loss0, grads) = eval(params, true)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite(format!("loss at base point: {loss0}")));
    }
    let grads = grads.ok_or_else(|| Error::invalid("eval returned no gradients"))?;
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "eval returned {} gradient buffers for {} params",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(&grads) {
        if g.len() != p.numel() {
            return Err(Error::invalid(format!(
                "gradient buffer for {name} has {} entries, param has {}",
                g.len(),
                p.numel()
            )));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} contains {bad}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        failures: Vec::new(),
        tolerance: cfg.tolerance,
    };

    // Kinks (leaky relu) and argmax switches (max pooling) inside the
    // difference interval corrupt a single probe by a whole path's worth of
    // gradient. Shrinking the step moves the interval off the kink, so the
    // artifact dies away while a real backward bug stays put. A probe only
    // fails once every rung of the ladder disagrees with the analytic value.
    let steps = [cfg.step, cfg.step / 8.0, cfg.step / 64.0, cfg.step / 512.0];

    for pi in 0..params.len() {
        let (name, tensor) = params.entry(pi);
        let n = tensor.numel();
        for _ in 0..cfg.samples {
            let ci = rng.gen_range(0..n);
            let orig = tensor.data()[ci];
            let analytic = grads[pi][ci];

            let mut best: Option<GradCheckFinding> = None;
            for &h in &steps {
                work.entry_mut(pi).1.data_mut()[ci] = orig + h;
                let (lp, _) = eval(&work, false)?;
                work.entry_mut(pi).1.data_mut()[ci] = orig - h;
                let (lm, _) = eval(&work, false)?;
                work.entry_mut(pi).1.data_mut()[ci] = orig;

                if !lp.is_finite() || !lm.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss while perturbing {name}[{ci}]: {lp}, {lm}"
                    )));
                }
                let numeric = (lp - lm) / (2.0 * h);
                let e = rel_err(analytic, numeric);
                if best.as_ref().map_or(true, |b| e < b.rel_err) {
                    best = Some(GradCheckFinding {
                        param: name.to_string(),
                        index: ci,
                        analytic,
                        numeric,
                        rel_err: e,
                    });
                }
                if e <= cfg.tolerance {
                    break;
                }
            }
            let finding = best.expect("at least one step ran");
            let e = finding.rel_err;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some(finding.clone());
            }
            if e > cfg.tolerance {
                report.failures.push(finding);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Scalar readout with distinct per-element adjoints: sum of the output
/// times fixed random coefficients. A plain sum would hand every element
/// the same adjoint and mask permutation mistakes.
fn readout(
    g: &mut Graph<f64>,
    out: crate::graph::NodeId,
    coeffs: &Tensor<f64>,
) -> Result<crate::graph::NodeId> {
    let c = g.constant(coeffs.clone());
    let prod = g.mul(out, c)?;
    Ok(g.sum_all(prod))
}

/// Checks the temporal-collapse stack alone: permute, two 3d convolutions,
/// leaky relu, reshape.
pub fn check_processor(
    cfg: &GradCheckConfig,
    spec: &ProcessorSpec,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut problems = Vec::new();
    spec.validate(&mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f64> = ParamSet::new();
    for (name, cs) in [("conv1", spec.conv1_spec()), ("conv2", spec.conv2_spec())] {
        let k: usize = cs.kernel.iter().product();
        params.insert(
            &format!("{name}.weight"),
            xavier_uniform(&cs.weight_shape(), cs.in_channels * k, cs.out_channels * k, &mut rng),
        )?;
        // away from zero so the check does not sit at a special point
        params.insert(
            &format!("{name}.bias"),
            Tensor::rand_uniform(&cs.bias_shape(), -0.5, 0.5, &mut rng),
        )?;
    }
    let input: Tensor<f64> = Tensor::rand_uniform(
        &[1, spec.time_steps, spec.in_channels, height, width],
        0.0,
        1.0,
        &mut rng,
    );
    let coeffs: Tensor<f64> =
        Tensor::rand_uniform(&[1, spec.out_channels, height, width], -1.0, 1.0, &mut rng);

    gradcheck(cfg, &params, |ps, want| {
        let mut g = Graph::new();
        let ids: Vec<_> = (0..ps.len()).map(|i| g.leaf(ps.entry(i).1.clone())).collect();
        let x = g.constant(input.clone());
        let x = g.permute(x, &[0, 2, 1, 3, 4])?;
        let h = conv3d(&mut g, x, ids[0], ids[1], &spec.conv1_spec())?;
        let h = g.leaky_relu(h, spec.leaky_slope);
        let h = conv3d(&mut g, h, ids[2], ids[3], &spec.conv2_spec())?;
        let h = g.leaky_relu(h, spec.leaky_slope);
        let s = g.value(h).shape().to_vec();
        let h = g.reshape(h, &[s[0], s[1], s[3], s[4]])?;
        let total = readout(&mut g, h, &coeffs)?;
        let loss = g.value(total).item()?;
        let grads = if want {
            g.backward(total)?;
            Some(ids.iter().map(|&id| g.take_grad(id).expect("param leaf")).collect())
        } else {
            None
        };
        Ok((loss, grads))
    })
}

/// Checks the segmentation network alone on a single frame.
pub fn check_unet(
    cfg: &GradCheckConfig,
    spec: &TinyUNetSpec,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let model: Model<f64> = build_model(&ModelSpec::single_image(spec.clone()), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let input: Tensor<f64> =
        Tensor::rand_uniform(&[1, spec.in_channels, height, width], 0.0, 1.0, &mut rng);
    let coeffs: Tensor<f64> =
        Tensor::rand_uniform(&[1, spec.num_classes, height, width], -1.0, 1.0, &mut rng);

    gradcheck(cfg, &model.params, |ps, want| {
        let mut g = Graph::new();
        let mut ex = GraphExec::new(&mut g, ps);
        let logits = model.logits(&mut ex, input.clone())?;
        let ids = ex.param_ids().to_vec();
        let total = readout(ex.graph, logits, &coeffs)?;
        let loss = g.value(total).item()?;
        let grads = if want {
            g.backward(total)?;
            Some(ids.iter().map(|&id| g.take_grad(id).expect("param leaf")).collect())
        } else {
            None
        };
        Ok((loss, grads))
    })
}

/// Checks the full pipeline the trainer optimizes: model, softmax, and the
/// blended hierarchy loss against random labels.
pub fn check_composite(
    cfg: &GradCheckConfig,
    spec: &ModelSpec,
    taxonomy: &Taxonomy,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if spec.unet.num_classes != taxonomy.num_species() {
        return Err(Error::invalid(format!(
            "model has {} classes, taxonomy has {} species",
            spec.unet.num_classes,
            taxonomy.num_species()
        )));
    }
    let model: Model<f64> = build_model(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let input_shape = match spec.mode {
        Mode::SingleImage => vec![1, spec.unet.in_channels, height, width],
        Mode::TimeSeries => {
            let p = spec.processor.as_ref().expect("validated by build_model");
            vec![1, p.time_steps, p.in_channels, height, width]
        }
    };
    let input: Tensor<f64> = Tensor::rand_uniform(&input_shape, 0.0, 1.0, &mut rng);
    let classes = taxonomy.num_species() as u8;
    let pixels: Vec<u8> = (0..height * width)
        .map(|_| {
            if rng.gen_range(0..10) == 0 {
                IGNORE
            } else {
                rng.gen_range(0..classes)
            }
        })
        .collect();
    let labels = MaskBatch::from_masks(&[Mask::new(height, width, pixels)?])?;
    let weights = HierarchyWeights::default();

    gradcheck(cfg, &model.params, |ps, want| {
        let mut g = Graph::new();
        let mut ex = GraphExec::new(&mut g, ps);
        let logits = model.logits(&mut ex, input.clone())?;
        let ids = ex.param_ids().to_vec();
        let probs = ex.graph.softmax(logits, 1)?;
        let loss = hierarchical_loss(
            ex.graph,
            probs,
            &labels,
            taxonomy,
            &weights,
            Normalization::ByPixels,
        )?;
        let lv = g.value(loss.total).item()?;
        let grads = if want {
            g.backward(loss.total)?;
            Some(ids.iter().map(|&id| g.take_grad(id).expect("param leaf")).collect())
        } else {
            None
        };
        Ok((lv, grads))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn quadratic_params() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_f64s(&[3], &[0.3, -1.2, 2.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::from_f64s(&[1], &[0.7]).unwrap()).unwrap();
        p
    }

    // loss = sum(w*w) + 3*b, taking the graph path so the test exercises
    // the same machinery models use.
    fn eval_quadratic(params: &ParamSet<f64>, want: bool) -> crate::error::Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let w = g.leaf(params.get("w").unwrap().clone());
        let b = g.leaf(params.get("b").unwrap().clone());
        let ww = g.mul(w, w)?;
        let sw = g.sum_all(ww);
        let sb = g.sum_all(b);
        let sb3 = g.scale(sb, 3.0);
        let loss = g.add(sw, sb3)?;
        let lv = g.value(loss).item()?;
        if !want {
            return Ok((lv, None));
        }
        g.backward(loss)?;
        let gw = g.take_grad(w).unwrap();
        let gb = g.take_grad(b).unwrap();
        Ok((lv, Some(vec![gw, gb])))
    }

    #[test]
    fn correct_gradients_pass() {
        let cfg = GradCheckConfig {
            samples: 10,
            ..Default::default()
        };
        let report = gradcheck(&cfg, &quadratic_params(), eval_quadratic).unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);
        assert_eq!(report.checked, 20);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let cfg = GradCheckConfig {
            samples: 10,
            ..Default::default()
        };
        let report = gradcheck(&cfg, &quadratic_params(), |p, want| {
            let (l, g) = eval_quadratic(p, want)?;
            Ok((
                l,
                g.map(|mut g| {
                    for v in g[0].iter_mut() {
                        *v += 0.5;
                    }
                    g
                }),
            ))
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.failures.iter().all(|f| f.param == "w"));
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let cfg = GradCheckConfig::default();
        let err = gradcheck(&cfg, &quadratic_params(), |p, want| {
            let (l, g) = eval_quadratic(p, want)?;
            Ok((
                l,
                g.map(|mut g| {
                    g[1][0] = f64::NAN;
                    g
                }),
            ))
        })
        .unwrap_err();
        assert!(err.to_string().contains("b"));
    }

    #[test]
    fn small_model_targets_pass() {
        let cfg = GradCheckConfig {
            samples: 4,
            tolerance: 1e-4,
            ..Default::default()
        };
        let mut proc = ProcessorSpec::default();
        proc.in_channels = 1;
        proc.mid_channels = 2;
        proc.out_channels = 2;
        let report = check_processor(&cfg, &proc, 6, 6, 11).unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);
        assert_eq!(report.checked, 16);

        let mut unet = TinyUNetSpec::new(2, 3);
        unet.base_channels = 2;
        unet.depth = 1;
        let report = check_unet(&cfg, &unet, 4, 4, 12).unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);

        let taxonomy = Taxonomy::from_json_str(
            r#"{
              "species": [
                {"name": "a", "genus": "ga"},
                {"name": "b", "genus": "ga"},
                {"name": "c", "genus": "gc"}
              ],
              "genera": [
                {"name": "ga", "taxon": "t1"},
                {"name": "gc", "taxon": "t2"}
              ]
            }"#,
        )
        .unwrap();
        let mut unet = TinyUNetSpec::new(proc.out_channels, 3);
        unet.base_channels = 2;
        unet.depth = 1;
        let spec = ModelSpec::time_series(proc, unet);
        let loose = GradCheckConfig {
            samples: 4,
            tolerance: 1e-3,
            ..Default::default()
        };
        let report = check_composite(&loose, &spec, &taxonomy, 4, 4, 13).unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);

        let mut wrong = spec.clone();
        wrong.unet.num_classes = 5;
        assert!(check_composite(&loose, &wrong, &taxonomy, 4, 4, 13).is_err());
    }
}
