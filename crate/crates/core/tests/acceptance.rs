//! Acceptance criteria for the whole toolkit. Each test prints exactly one
//! line, "ACCEPTANCE cN: PASS/FAIL (detail)", then asserts. Run with
//! `cargo test --test acceptance -- --nocapture` to see every line.
//!
//! The two training criteria (c6, c7) carry wall-clock budgets sized for a
//! single CPU core and take several minutes.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treeseg_core::gradcheck::{
    check_composite, check_processor, check_unet, GradCheckConfig,
};
use treeseg_core::graph::Graph;
use treeseg_core::io::{read_tensor, write_tensor};
use treeseg_core::losses::{
    cross_entropy, hierarchical_loss, HierarchyWeights, Normalization,
};
use treeseg_core::mask::{Mask, MaskBatch, IGNORE};
use treeseg_core::metrics::iou;
use treeseg_core::models::{
    build_model, Mode, Model, ModelSpec, ProcessorSpec, TinyUNetSpec,
};
use treeseg_core::nn::conv3d_fwd;
use treeseg_core::synth::{
    default_signatures, default_time_tags, generate_dataset, spatial_split,
    taxonomy_from_signatures, SceneSpec, SplitId,
};
use treeseg_core::taxonomy::{Level, Taxonomy};
use treeseg_core::tensor::Tensor;
use treeseg_core::train::{compare_losses, compare_modes, train, LossKind, TrainConfig};

fn verdict(id: &str, pass: bool, detail: String) {
    println!(
        "ACCEPTANCE {id}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{id} failed: {detail}");
}

fn fixture_taxonomy() -> Taxonomy {
    Taxonomy::from_json_str(include_str!("fixtures/taxonomy_15.json")).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let hw = h * w;
    let mut data = vec![0.0f64; c * hw];
    for px in 0..hw {
        let mut sum = 0.0;
        let vals: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
        for v in &vals {
            sum += v;
        }
        for (cc, v) in vals.iter().enumerate() {
            data[cc * hw + px] = v / sum;
        }
    }
    Tensor::new(vec![1, c, h, w], data).unwrap()
}

#[test]
fn acceptance_c1_gradients_match_finite_differences() {
    let cfg = GradCheckConfig {
        tolerance: 1e-4,
        samples: 20,
        seed: 1,
        ..Default::default()
    };
    let proc = check_processor(&cfg, &ProcessorSpec::default(), 16, 16, 1).unwrap();

    let mut unet_spec = TinyUNetSpec::new(3, 6);
    unet_spec.base_channels = 8;
    unet_spec.depth = 2;
    let cfg = GradCheckConfig {
        tolerance: 1e-4,
        samples: 8,
        seed: 2,
        ..Default::default()
    };
    let unet = check_unet(&cfg, &unet_spec, 16, 16, 2).unwrap();

    let taxonomy = taxonomy_from_signatures(&default_signatures()).unwrap();
    let processor = ProcessorSpec::default();
    let mut comp_unet = TinyUNetSpec::new(processor.out_channels, taxonomy.num_species());
    comp_unet.base_channels = 8;
    comp_unet.depth = 2;
    let spec = ModelSpec::time_series(processor, comp_unet);
    let cfg = GradCheckConfig {
        tolerance: 1e-3,
        samples: 4,
        seed: 3,
        ..Default::default()
    };
    let comp = check_composite(&cfg, &spec, &taxonomy, 16, 16, 3).unwrap();

    verdict(
        "c1",
        proc.passed() && unet.passed() && comp.passed(),
        format!(
            "max rel err: processor {:.2e}/{} pts (tol 1e-4), unet {:.2e}/{} pts (tol 1e-4), composite {:.2e}/{} pts (tol 1e-3)",
            proc.max_rel_err, proc.checked, unet.max_rel_err, unet.checked, comp.max_rel_err, comp.checked
        ),
    );
}

#[test]
fn acceptance_c2_probability_aggregation_is_consistent() {
    let tax = fixture_taxonomy();
    let s2g = tax.species_to_genus();
    let g2t = tax.genus_to_taxon();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (h, w) = (2, 2);
    let mut max_sum_err = 0.0f64;
    let mut max_ce_err = 0.0f64;

    for _ in 0..1000 {
        let probs = random_simplex(&mut rng, tax.num_species(), h, w);
        let genus = tax.aggregate_probs(&probs, Level::Genus).unwrap();
        let taxon = tax.aggregate_probs(&probs, Level::Taxon).unwrap();

        // oracle: same grouping done longhand, in species id order
        let hw = h * w;
        let mut genus_oracle = vec![0.0f64; tax.num_genera() * hw];
        for s in 0..tax.num_species() {
            for px in 0..hw {
                genus_oracle[s2g[s] * hw + px] += probs.data()[s * hw + px];
            }
        }
        assert_eq!(genus.data(), &genus_oracle[..], "genus group sums differ");
        let mut taxon_oracle = vec![0.0f64; tax.num_taxa() * hw];
        for g in 0..tax.num_genera() {
            for px in 0..hw {
                taxon_oracle[g2t[g] * hw + px] += genus_oracle[g * hw + px];
            }
        }
        assert_eq!(taxon.data(), &taxon_oracle[..], "taxon group sums differ");

        // the two routes to taxon level must agree bitwise
        let via_genus = tax.aggregate_genus_to_taxon(&genus).unwrap();
        assert_eq!(taxon.data(), via_genus.data(), "taxon routes diverge");

        // each level still sums to one per pixel
        for px in 0..hw {
            for (data, c) in [
                (genus.data(), tax.num_genera()),
                (taxon.data(), tax.num_taxa()),
            ] {
                let sum: f64 = (0..c).map(|i| data[i * hw + px]).sum();
                max_sum_err = max_sum_err.max((sum - 1.0).abs());
            }
        }

        // weights (1, 0, 0) reduce the blended loss to plain cross entropy
        let labels: Vec<u8> = (0..hw)
            .map(|_| {
                if rng.gen_range(0..8) == 0 {
                    IGNORE
                } else {
                    rng.gen_range(0..tax.num_species() as u8)
                }
            })
            .collect();
        if labels.iter().all(|&v| v == IGNORE) {
            continue;
        }
        let batch = MaskBatch::from_masks(&[Mask::new(h, w, labels).unwrap()]).unwrap();
        let only_species = HierarchyWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let hl =
            hierarchical_loss(&mut g, p, &batch, &tax, &only_species, Normalization::ByPixels)
                .unwrap();
        let mut g2 = Graph::new();
        let p2 = g2.constant(probs.clone());
        let ce = cross_entropy(&mut g2, p2, &batch, Normalization::ByPixels).unwrap();
        let diff =
            (g.value(hl.total).item().unwrap() - g2.value(ce).item().unwrap()).abs();
        max_ce_err = max_ce_err.max(diff);
    }

    // a perfectly confident correct prediction has (near) zero loss
    let labels = MaskBatch::from_masks(&[Mask::new(1, 4, vec![0, 3, 9, 14]).unwrap()]).unwrap();
    let mut onehot = vec![0.0f64; tax.num_species() * 4];
    for (px, &cls) in [0usize, 3, 9, 14].iter().enumerate() {
        onehot[cls * 4 + px] = 1.0;
    }
    let probs = Tensor::new(vec![1, tax.num_species(), 1, 4], onehot).unwrap();
    let mut g = Graph::new();
    let p = g.constant(probs);
    let hl = hierarchical_loss(
        &mut g,
        p,
        &labels,
        &tax,
        &HierarchyWeights::default(),
        Normalization::ByPixels,
    )
    .unwrap();
    let degenerate = g.value(hl.total).item().unwrap().abs();

    let pass = max_sum_err <= 1e-12 && max_ce_err <= 1e-9 && degenerate <= 1e-6;
    verdict(
        "c2",
        pass,
        format!(
            "1000 simplexes, 15 species: group sums exact, routes bitwise, max |sum-1| {max_sum_err:.1e}, max |hloss(1,0,0)-ce| {max_ce_err:.1e}, one-hot loss {degenerate:.1e}"
        ),
    );
}

#[test]
fn acceptance_c3_blended_loss_matches_frozen_value() {
    const EXPECT: f64 = 0.45054566736396443;
    let tax = Taxonomy::from_json_str(
        r#"{
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
        }"#,
    )
    .unwrap();
    let probs: Tensor<f64> = Tensor::from_f64s(&[1, 4, 1, 1], &[0.25; 4]).unwrap();
    let labels = MaskBatch::from_masks(&[Mask::new(1, 1, vec![0]).unwrap()]).unwrap();
    let mut g = Graph::new();
    let p = g.constant(probs);
    let loss = hierarchical_loss(
        &mut g,
        p,
        &labels,
        &tax,
        &HierarchyWeights::default(),
        Normalization::ByClasses,
    )
    .unwrap();
    let total = g.value(loss.total).item().unwrap();
    let err = (total - EXPECT).abs();
    verdict(
        "c3",
        err <= 1e-6,
        format!("uniform 4-class pixel: {total:.17} vs {EXPECT:.17}, |diff| {err:.1e}"),
    );
}

#[test]
fn acceptance_c4_iou_matches_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (h, w) = (9, 7);
    let mut checked = 0;
    let mut none_cases = 0;
    for _ in 0..200 {
        let gen_mask = |rng: &mut ChaCha8Rng| {
            let data: Vec<u8> = (0..h * w)
                .map(|_| {
                    if rng.gen_range(0..6) == 0 {
                        IGNORE
                    } else {
                        rng.gen_range(0..5)
                    }
                })
                .collect();
            Mask::new(h, w, data).unwrap()
        };
        let pred = gen_mask(&mut rng);
        let truth = gen_mask(&mut rng);
        // class 5 never occurs, so it exercises the undefined case
        let class = rng.gen_range(0..6u8);

        let mut p = HashSet::new();
        let mut t = HashSet::new();
        for i in 0..h * w {
            if pred.data[i] == IGNORE || truth.data[i] == IGNORE {
                continue;
            }
            if pred.data[i] == class {
                p.insert(i);
            }
            if truth.data[i] == class {
                t.insert(i);
            }
        }
        let union = p.union(&t).count();
        let expect = if union == 0 {
            None
        } else {
            Some(p.intersection(&t).count() as f64 / union as f64)
        };
        let got = iou(&pred, &truth, class).unwrap();
        assert_eq!(got, expect, "class {class} disagrees with the set oracle");
        checked += 1;
        if expect.is_none() {
            none_cases += 1;
        }
    }
    verdict(
        "c4",
        checked == 200 && none_cases > 0,
        format!("200 random mask pairs agree exactly, {none_cases} with undefined IoU"),
    );
}

#[test]
fn acceptance_c5_temporal_collapse_shapes_and_size() {
    let spec = ProcessorSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let w1: Tensor<f32> = Tensor::rand_uniform(&spec.conv1_spec().weight_shape(), -0.1, 0.1, &mut rng);
    let b1: Tensor<f32> = Tensor::rand_uniform(&spec.conv1_spec().bias_shape(), -0.1, 0.1, &mut rng);
    let w2: Tensor<f32> = Tensor::rand_uniform(&spec.conv2_spec().weight_shape(), -0.1, 0.1, &mut rng);
    let b2: Tensor<f32> = Tensor::rand_uniform(&spec.conv2_spec().bias_shape(), -0.1, 0.1, &mut rng);

    let mut shapes_ok = true;
    let mut detail = String::new();
    for hw in [8usize, 64, 768] {
        let x: Tensor<f32> =
            Tensor::rand_uniform(&[1, 3, spec.time_steps, hw, hw], 0.0, 1.0, &mut rng);
        let h1 = conv3d_fwd(&x, &w1, &b1, &spec.conv1_spec()).unwrap();
        shapes_ok &= h1.shape() == [1, 32, 2, hw, hw];
        let h2 = conv3d_fwd(&h1, &w2, &b2, &spec.conv2_spec()).unwrap();
        shapes_ok &= h2.shape() == [1, 64, 1, hw, hw];
        detail.push_str(&format!("{hw}x{hw} -> (1,64,1,{hw},{hw}); "));
    }

    // a series with the wrong number of frames is rejected up front
    let mut unet = TinyUNetSpec::new(64, 6);
    unet.base_channels = 4;
    unet.depth = 2;
    let model: Model<f32> =
        build_model(&ModelSpec::time_series(spec.clone(), unet), 5).unwrap();
    let bad: Tensor<f32> = Tensor::rand_uniform(&[1, 3, 3, 16, 16], 0.0, 1.0, &mut rng);
    let rejected = model.predict_logits(bad).is_err();

    let params = spec.param_count();
    let from_model: usize = model
        .params
        .iter()
        .filter(|(name, _)| name.starts_with("processor."))
        .map(|(_, t)| t.numel())
        .sum();

    verdict(
        "c5",
        shapes_ok && rejected && params == 39552 && from_model == 39552,
        format!("{detail}wrong frame count rejected, {params} collapse parameters"),
    );
}

#[test]
fn acceptance_c6_time_series_model_overfits_small_set() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let scene = SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    generate_dataset(&data, &scene, &default_signatures(), &default_time_tags(), 8, 42).unwrap();

    let mut cfg = TrainConfig::new(&data, dir.path().join("run"));
    cfg.mode = Mode::TimeSeries;
    cfg.loss = LossKind::Hloss;
    cfg.lr = 2e-3;
    cfg.epochs = 200;
    cfg.batch_size = 4;
    cfg.stop_at_miou = Some(0.92);
    let summary = train(&cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    verdict(
        "c6",
        summary.best_val_miou >= 0.90 && elapsed <= 600.0,
        format!(
            "train mIoU {:.4} after {} epochs in {elapsed:.0}s (budget 600s, floor 0.90)",
            summary.best_val_miou, summary.epochs_run
        ),
    );
}

#[test]
fn acceptance_c7_frame_stack_beats_single_frame_on_the_pair() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let scene = SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    let mut ds =
        generate_dataset(&data, &scene, &default_signatures(), &default_time_tags(), 64, 7)
            .unwrap();
    ds.assign_splits((0.63, 0.16, 0.21), 1).unwrap();

    let mut deltas = Vec::new();
    let mut single = Vec::new();
    let mut lines = Vec::new();
    for seed in [101u64, 202, 303] {
        let mut cfg = TrainConfig::new(&data, dir.path().join(format!("seed_{seed}")));
        cfg.loss = LossKind::Hloss;
        cfg.lr = 2e-3;
        cfg.epochs = 30;
        cfg.batch_size = 4;
        cfg.seed = seed;
        let cmp = compare_modes(&cfg).unwrap();
        let pair = cmp.pair.expect("dataset declares a confusable pair");
        lines.push(format!(
            "seed {seed}: stack {:.3} vs single {:.3}",
            pair.mean_iou_a, pair.mean_iou_b
        ));
        deltas.push(pair.delta);
        single.push(pair.mean_iou_b);
    }
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let mean_single = single.iter().sum::<f64>() / single.len() as f64;
    let elapsed = start.elapsed().as_secs_f64();

    verdict(
        "c7",
        mean_delta >= 0.2 && mean_single <= 0.55 && elapsed <= 3600.0,
        format!(
            "pair IoU over 3 seeds: {}; mean delta {mean_delta:.3} (floor 0.2), mean single-frame {mean_single:.3} (cap 0.55), {elapsed:.0}s (budget 3600s)",
            lines.join(", ")
        ),
    );
}

#[test]
fn acceptance_c8_column_splits_are_banded_and_proportional() {
    let ratios = (0.63, 0.16, 0.21);
    let mut detail = String::new();
    let mut ok = true;

    for (rows, cols) in [(8usize, 8usize), (8, 12), (10, 10), (9, 16)] {
        let bands = spatial_split(cols, ratios, 1).unwrap();
        assert_eq!(bands.len(), cols);
        // contiguous train | buffer | val | buffer | test layout
        let order = [
            SplitId::Train,
            SplitId::Buffer,
            SplitId::Val,
            SplitId::Buffer,
            SplitId::Test,
        ];
        let mut at = 0;
        let mut widths = [0usize; 5];
        for &band in &bands {
            while at < order.len() && order[at] != band {
                at += 1;
            }
            if at == order.len() {
                ok = false;
                break;
            }
            widths[at] += 1;
        }
        ok &= widths.iter().all(|&w| w > 0);
        ok &= widths[1] == 1 && widths[3] == 1;

        let assignable = (cols - 2) as f64;
        let fracs = [
            widths[0] as f64 / assignable,
            widths[2] as f64 / assignable,
            widths[4] as f64 / assignable,
        ];
        for (frac, target) in fracs.iter().zip([ratios.0, ratios.1, ratios.2]) {
            ok &= (frac - target).abs() <= 0.10;
        }
        detail.push_str(&format!(
            "{rows}x{cols}: {}|{}|{} of {assignable}; ",
            widths[0], widths[2], widths[4]
        ));
    }

    let too_small = spatial_split(4, ratios, 1).is_err();
    ok &= too_small;
    verdict(
        "c8",
        ok,
        format!("{detail}4 columns rejected, fractions within 0.10 absolute"),
    );
}

#[test]
fn acceptance_c9_runs_are_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let scene = SceneSpec {
        height: 24,
        width: 24,
        crowns_per_tile: 4,
        ..SceneSpec::default()
    };
    generate_dataset(&data, &scene, &default_signatures(), &default_time_tags(), 12, 9).unwrap();

    let base = |out: std::path::PathBuf| {
        let mut cfg = TrainConfig::new(&data, out);
        cfg.mode = Mode::SingleImage;
        cfg.loss = LossKind::DiceCe;
        cfg.lr = 1e-3;
        cfg.epochs = 6;
        cfg.batch_size = 4;
        cfg.base_channels = 4;
        cfg.depth = 2;
        cfg
    };

    // identical configs, fresh directories: identical history bytes
    let a = train(&base(dir.path().join("a"))).unwrap();
    let b = train(&base(dir.path().join("b"))).unwrap();
    let bytes_a = std::fs::read(&a.csv_path).unwrap();
    let identical = bytes_a == std::fs::read(&b.csv_path).unwrap();

    // a 3-epoch run resumed to 6 matches the direct 6-epoch run
    let mut first = base(dir.path().join("c"));
    first.epochs = 3;
    train(&first).unwrap();
    let mut second = base(dir.path().join("c"));
    second.resume = Some(dir.path().join("c/last.ckpt"));
    let resumed = train(&second).unwrap();
    let text_a = String::from_utf8(bytes_a).unwrap();
    let text_c = std::fs::read_to_string(&resumed.csv_path).unwrap();
    let losses = |text: &str| -> Vec<f64> {
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect()
    };
    let (la, lc) = (losses(&text_a), losses(&text_c));
    let max_resume_diff = la
        .iter()
        .zip(&lc)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let resume_ok = la.len() == 6 && lc.len() == 6 && max_resume_diff <= 1e-6;

    // binary tensor files round-trip bitwise
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut vals: Vec<f32> = (0..104).map(|_| rng.gen_range(-1e6..1e6)).collect();
    vals.extend([f32::MAX, f32::MIN_POSITIVE, -0.0, 1.0e-38]);
    let t32 = Tensor::new(vec![4, 27], vals).unwrap();
    let p32 = dir.path().join("t32.tseg");
    write_tensor(&p32, &t32).unwrap();
    let r32: Tensor<f32> = read_tensor(&p32).unwrap();
    let bits32 = t32
        .data()
        .iter()
        .zip(r32.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let t64: Tensor<f64> =
        Tensor::rand_uniform(&[3, 5, 7], -1e9, 1e9, &mut rng);
    let p64 = dir.path().join("t64.tseg");
    write_tensor(&p64, &t64).unwrap();
    let r64: Tensor<f64> = read_tensor(&p64).unwrap();
    let bits64 = t64
        .data()
        .iter()
        .zip(r64.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());

    verdict(
        "c9",
        identical && resume_ok && bits32 && bits64,
        format!(
            "rerun bytes identical: {identical}; resume max loss diff {max_resume_diff:.1e}; tensor files bitwise: {}",
            bits32 && bits64
        ),
    );
}

#[test]
fn acceptance_c10_loss_comparison_is_stable_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let scene = SceneSpec {
        height: 24,
        width: 24,
        crowns_per_tile: 4,
        ..SceneSpec::default()
    };
    let mut ds =
        generate_dataset(&data, &scene, &default_signatures(), &default_time_tags(), 30, 3)
            .unwrap();
    ds.assign_splits((0.63, 0.16, 0.21), 1).unwrap();

    let base = |out: std::path::PathBuf| {
        let mut cfg = TrainConfig::new(&data, out);
        cfg.mode = Mode::SingleImage;
        cfg.lr = 2e-3;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.base_channels = 4;
        cfg.depth = 2;
        cfg
    };
    let first = compare_losses(&base(dir.path().join("x"))).unwrap();
    let second = compare_losses(&base(dir.path().join("y"))).unwrap();

    let csv = first.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    let species = ds.taxonomy.num_species();
    let schema_ok = lines.len() == species + 2
        && lines[0] == "class,iou_hloss,iou_dice_ce,delta"
        && lines.last().unwrap().starts_with("mIoU,")
        && lines.iter().all(|l| l.split(',').count() == 4);
    let stable = csv == second.to_csv();

    verdict(
        "c10",
        schema_ok && stable,
        format!(
            "{} data rows + mIoU row, header fixed, rerun byte-identical: {stable}",
            species
        ),
    );
}
