//! Seeded oracle suites runnable from the CLI. Each suite compares a fast
//! path against its naive reference from [`crate::oracle`] and reports one
//! line; `run_all` returns false if anything failed.

use crate::cover::{optimal_cover, PurityClassifier};
use crate::descriptor::{flatten_descriptor, pool_component};
use crate::loss::{cross_entropy, kl_divergence, softmax, ClassDistribution};
use crate::nn::{conv2d, maxpool2, FilterBank};
use crate::optim::grad_check;
use crate::oracle;
use crate::seghier::{build_merge_tree, build_pixel_graph, SegTree};
use crate::volume::FeatureVolume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type SuiteResult = std::result::Result<(), String>;

fn random_volume(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureVolume {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureVolume::from_vec(c, h, w, data).unwrap()
}

pub fn conv_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..20 {
        let in_c = rng.random_range(1..4);
        let out_c = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let pad = rng.random_range(0..=k / 2);
        let h = rng.random_range(k.max(3)..10);
        let w = rng.random_range(k.max(3)..10);
        let fan_in = rng.random_range(1..=in_c);
        let mut bank = FilterBank::random_table(in_c, out_c, fan_in, k, &mut rng)
            .map_err(|e| e.to_string())?;
        bank.init_uniform(&mut rng);
        let input = random_volume(in_c, h, w, &mut rng);
        let fast = conv2d(&input, &bank, pad).map_err(|e| e.to_string())?;
        let slow = oracle::conv_reference(&input, &bank, pad);
        let err = fast.max_abs_diff(&slow);
        if err > 1e-12 {
            return Err(format!("trial {trial}: conv differs from oracle by {err}"));
        }
    }
    Ok(())
}

pub fn maxpool_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..30 {
        let input = random_volume(
            rng.random_range(1..4),
            rng.random_range(1..9),
            rng.random_range(1..9),
            &mut rng,
        );
        let fast = maxpool2(&input);
        let slow = oracle::maxpool_reference(&input);
        if fast != slow {
            return Err(format!("trial {trial}: maxpool differs from oracle"));
        }
    }
    Ok(())
}

pub fn mst_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..40 {
        let h = rng.random_range(2..=8);
        let w = rng.random_range(2..=8);
        let image = random_volume(3, h, w, &mut rng);
        let graph = build_pixel_graph(&image);
        let tree = build_merge_tree(&graph);
        let mut ours: Vec<f64> = tree
            .candidates()
            .map(|id| tree.nodes[id as usize].altitude)
            .collect();
        let mut prim = oracle::mst_weights_prim(h * w, &graph.edges);
        ours.sort_by(f64::total_cmp);
        prim.sort_by(f64::total_cmp);
        if ours != prim {
            return Err(format!("trial {trial}: merge weights differ from Prim MST"));
        }
    }
    Ok(())
}

pub fn cover_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..200 {
        let leaves = rng.random_range(2..=64u32);
        let mut roots: Vec<u32> = (0..leaves).collect();
        let mut merges = Vec::new();
        let mut next = leaves;
        while roots.len() > 1 {
            let i = rng.random_range(0..roots.len());
            let a = roots.swap_remove(i);
            let j = rng.random_range(0..roots.len());
            let b = roots.swap_remove(j);
            merges.push((a, b, 1.0));
            roots.push(next);
            next += 1;
        }
        let mut tree = SegTree::from_merges(leaves, &merges).map_err(|e| e.to_string())?;
        for id in tree.candidates().collect::<Vec<_>>() {
            tree.set_cost(id, rng.random_range(0..10) as f64 / 5.0);
        }
        let fast = optimal_cover(&tree).map_err(|e| e.to_string())?;
        let (slow_choice, slow_total) = oracle::cover_reference(&tree);
        if fast.chosen != slow_choice {
            return Err(format!("trial {trial}: cover choices differ from brute force"));
        }
        if (fast.total_cost - slow_total).abs() > 1e-9 {
            return Err(format!(
                "trial {trial}: cover cost {} vs brute force {}",
                fast.total_cost, slow_total
            ));
        }
    }
    Ok(())
}

pub fn pooling_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..100 {
        let h = rng.random_range(4..12);
        let w = rng.random_range(4..12);
        let d = rng.random_range(1..6);
        let features = random_volume(d, h, w, &mut rng);
        let image = random_volume(3, h, w, &mut rng);
        let tree = build_merge_tree(&build_pixel_graph(&image));
        let ids: Vec<u32> = tree.candidates().collect();
        let node = ids[rng.random_range(0..ids.len())];
        let grid = rng.random_range(1..=5);
        let fast = pool_component(&features, &tree, node, grid).map_err(|e| e.to_string())?;
        let slow = oracle::pool_reference(&features, tree.pixels_of(node), grid);
        if flatten_descriptor(&fast) != slow {
            return Err(format!("trial {trial}: descriptor differs from oracle"));
        }
    }
    Ok(())
}

pub fn gradient_suite(seed: u64) -> SuiteResult {
    // two-layer classifier under the KL loss
    let clf = PurityClassifier::random(8, 6, 4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = ClassDistribution::new(vec![0.1, 0.4, 0.3, 0.2]).unwrap();
    let mut grads = vec![0.0; clf.param_count()];
    clf.kl_loss_and_grad(&x, &target, &mut grads)
        .map_err(|e| e.to_string())?;
    let mut params = Vec::new();
    clf.write_params(&mut params);
    let mut probe = clf.clone();
    let err = grad_check(
        |p| {
            probe.read_params(p).unwrap();
            let mut sink = vec![0.0; probe.param_count()];
            probe.kl_loss_and_grad(&x, &target, &mut sink).unwrap()
        },
        &params,
        &grads,
        1e-4,
    );
    if err > 1e-4 {
        return Err(format!("classifier KL gradient rel err {err}"));
    }
    Ok(())
}

pub fn loss_suite(_seed: u64) -> SuiteResult {
    let check = |cond: bool, msg: &str| -> SuiteResult {
        if cond {
            Ok(())
        } else {
            Err(msg.to_string())
        }
    };
    let d = softmax(&[3f64.ln(), 0.0]).map_err(|e| e.to_string())?;
    check((d.probs()[0] - 0.75).abs() < 1e-12, "softmax hand value")?;
    let uniform = ClassDistribution::uniform(8);
    let target = ClassDistribution::one_hot(8, 0);
    let ce = cross_entropy(&uniform, &target).map_err(|e| e.to_string())?;
    check((ce - 8f64.ln()).abs() < 1e-12, "cross entropy ln 8")?;
    let p = ClassDistribution::one_hot(2, 0);
    let q = ClassDistribution::uniform(2);
    let kl = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
    check((kl - 2f64.ln()).abs() < 1e-12, "kl ln 2")?;
    check(kl_divergence(&p, &p).map_err(|e| e.to_string())? == 0.0, "kl self")?;
    Ok(())
}

/// Runs every suite, printing one line each; returns overall success.
pub fn run_all(seed: u64) -> bool {
    let suites: [(&str, fn(u64) -> SuiteResult); 7] = [
        ("conv-vs-nested-loop", conv_suite),
        ("maxpool-vs-nested-loop", maxpool_suite),
        ("mst-vs-prim", mst_suite),
        ("cover-vs-brute-force", cover_suite),
        ("descriptor-vs-nested-loop", pooling_suite),
        ("gradients-vs-finite-differences", gradient_suite),
        ("loss-hand-values", loss_suite),
    ];
    let mut ok = true;
    for (name, suite) in suites {
        match suite(seed) {
            Ok(()) => println!("ok   {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                ok = false;
            }
        }
    }
    ok
}
