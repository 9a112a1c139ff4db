//! Acceptance run. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p hcpm --test acceptance -- 1 4 9`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hcpm::bench;
use hcpm::config::{self, RunConfig};
use hcpm::eval::{self, identity_scene};
use hcpm::train;
use hcpm_core::attention::{
    direct_pruning_attention, implicit_pruning_attention, linear_attention, MaskVar, PruneMask, PruningVariant,
};
use hcpm_core::encoder::{FeatureGrid, Scale};
use hcpm_core::flops::{count_flops, Workload};
use hcpm_core::geometry::{apply_homography, covisible_cells, depth_at, depth_validity, CovisMode};
use hcpm_core::gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
use hcpm_core::losses::{
    binary_cross_entropy, coarse_matching_loss, fine_loss, focal_loss, interactive_prune_loss, self_prune_loss,
    total_loss, Focal, LossTerms, LossWeights, VARIANCE_FLOOR,
};
use hcpm_core::nn::{Bound, ParamStore};
use hcpm_core::pipeline::{forward, match_set, predict, sample_loss, Model, PipelineConfig, Trainer};
use hcpm_core::pruning::{
    gumbel_softmax_sample, selection_count, topk_select, update_mask, DicsHead, Mode, SelfPruneHead, Side,
};
use hcpm_core::synthetic::{generate_pair, SceneConfig};
use hcpm_core::{Graph, Result as CoreResult, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_bools(rng: &mut impl Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(0.5)).collect()
}

fn bits(n: usize, code: usize) -> Vec<bool> {
    (0..n).map(|i| code >> i & 1 == 1).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn implicit_vs_direct(g: &mut Graph, q: Var, k: Var, v: Var, mq: &[bool], mk: &[bool]) -> CoreResult<f64> {
    let mq_t = PruneMask::from_bools(mq);
    let mk_t = PruneMask::from_bools(mk);
    let mqv = MaskVar::constant(g, mq_t.clone());
    let mkv = MaskVar::constant(g, mk_t.clone());
    let imp = implicit_pruning_attention(g, q, k, v, &mqv, &mkv)?;
    let (dir, rows) = direct_pruning_attention(g, q, k, v, &mq_t, &mk_t)?;
    let dv = g.value(dir).dims2().1;
    let mut worst: f64 = 0.0;
    for (r, &i) in rows.iter().enumerate() {
        worst = worst.max(max_diff(g.value(imp).row(i), g.value(dir).row(r)));
    }
    // pruned queries receive no message
    for (i, &keep) in mq.iter().enumerate() {
        if !keep {
            worst = worst.max(max_diff(g.value(imp).row(i), &vec![0.0; dv]));
        }
    }
    Ok(worst)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ones_worst: f64 = 0.0;
    for _ in 0..100 {
        let (nq, nk, d, dv) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let mut g = Graph::inference();
        let q = g.input(random_tensor(&mut rng, &[nq, d], -2.0, 2.0));
        let k = g.input(random_tensor(&mut rng, &[nk, d], -2.0, 2.0));
        let v = g.input(random_tensor(&mut rng, &[nk, dv], -2.0, 2.0));
        let mq = MaskVar::constant(&mut g, PruneMask::ones(nq));
        let mk = MaskVar::constant(&mut g, PruneMask::ones(nk));
        let imp = implicit_pruning_attention(&mut g, q, k, v, &mq, &mk).map_err(err)?;
        let lin = linear_attention(&mut g, q, k, v).map_err(err)?;
        ones_worst = ones_worst.max(max_diff(g.data(imp), g.data(lin)));
    }
    ensure(ones_worst <= 1e-12, || format!("all-ones mask differs from linear attention by {ones_worst:e}"))?;

    let mut pairs = 0usize;
    let mut worst: f64 = 0.0;
    for n in 1..=6 {
        let mut g = Graph::inference();
        let q = g.input(random_tensor(&mut rng, &[n, 4], -2.0, 2.0));
        let k = g.input(random_tensor(&mut rng, &[n, 4], -2.0, 2.0));
        let v = g.input(random_tensor(&mut rng, &[n, 3], -2.0, 2.0));
        // empty masks have no kept rows to compare
        for cq in 1..1usize << n {
            for ck in 1..1usize << n {
                worst = worst.max(implicit_vs_direct(&mut g, q, k, v, &bits(n, cq), &bits(n, ck)).map_err(err)?);
                pairs += 1;
            }
        }
    }
    let mut random_cases = 0usize;
    for n in 7..=16 {
        for _ in 0..200 {
            let mut g = Graph::inference();
            let q = g.input(random_tensor(&mut rng, &[n, 6], -2.0, 2.0));
            let k = g.input(random_tensor(&mut rng, &[n, 6], -2.0, 2.0));
            let v = g.input(random_tensor(&mut rng, &[n, 5], -2.0, 2.0));
            let (mut mq, mut mk) = (random_bools(&mut rng, n), random_bools(&mut rng, n));
            mq[rng.gen_range(0..n)] = true;
            mk[rng.gen_range(0..n)] = true;
            worst = worst.max(implicit_vs_direct(&mut g, q, k, v, &mq, &mk).map_err(err)?);
            random_cases += 1;
        }
    }
    ensure(worst <= 1e-10, || format!("implicit vs direct kept rows differ by {worst:e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    println!("  ones-mask max diff {ones_worst:.1e}; {pairs} exhaustive + {random_cases} random mask pairs, max diff {worst:.1e}; {secs:.1} s");
    Ok(())
}

// ---------------------------------------------------------------- 2

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> CoreResult<Var> {
    let wi = g.input(w.clone());
    let xs = g.reshape(x, &w.shape)?;
    let m = g.mul(xs, wi)?;
    Ok(g.sum(m))
}

fn report(name: &str, r: CoreResult<GradCheckReport>, tol: f64, failures: &mut Vec<String>) {
    match r {
        Ok(r) if r.passed() => println!("  {name}: max rel err {:.1e} over {} coords", r.max_rel_error, r.coords_checked),
        Ok(r) => failures.push(format!("{name}: max rel err {:e} ≥ {tol:e} at {:?}", r.max_rel_error, r.worst)),
        Err(e) => failures.push(format!("{name}: {e}")),
    }
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for t in store.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = Vec::new();

    let q = random_tensor(&mut rng, &[5, 4], -1.5, 1.5);
    let k = random_tensor(&mut rng, &[6, 4], -1.5, 1.5);
    let v = random_tensor(&mut rng, &[6, 3], -1.5, 1.5);
    let w = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    report(
        "linear attention",
        grad_check(
            |g, x| {
                let o = linear_attention(g, x[0], x[1], x[2])?;
                weighted_sum(g, o, &w)
            },
            &[q.clone(), k.clone(), v.clone()],
            H,
            TOL,
        ),
        TOL,
        &mut failures,
    );

    // soft masks exercise the mask path the straight-through estimator uses
    let mq = random_tensor(&mut rng, &[5], 0.2, 1.0);
    let mk = random_tensor(&mut rng, &[6], 0.2, 1.0);
    report(
        "implicit pruning attention (soft masks)",
        grad_check(
            |g, x| {
                let mqv = MaskVar { var: x[3], mask: PruneMask::ones(5) };
                let mkv = MaskVar { var: x[4], mask: PruneMask::ones(6) };
                let o = implicit_pruning_attention(g, x[0], x[1], x[2], &mqv, &mkv)?;
                weighted_sum(g, o, &w)
            },
            &[q.clone(), k.clone(), v.clone(), mq, mk],
            H,
            TOL,
        ),
        TOL,
        &mut failures,
    );

    let keep_q = PruneMask::from_bools(&[true, false, true, true, false]);
    let keep_k = PruneMask::from_bools(&[false, true, true, false, true, true]);
    let wd = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    report(
        "direct pruning attention",
        grad_check(
            |g, x| {
                let (o, _) = direct_pruning_attention(g, x[0], x[1], x[2], &keep_q, &keep_k)?;
                weighted_sum(g, o, &wd)
            },
            &[q, k, v],
            H,
            TOL,
        ),
        TOL,
        &mut failures,
    );

    let mut store = ParamStore::new();
    let head = SelfPruneHead::new(&mut store, &mut rng, 6);
    randomize(&mut store, &mut rng, 0.3);
    let feats = random_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let ws = random_tensor(&mut rng, &[4], -1.0, 1.0);
    let mut inputs = store.tensors().to_vec();
    inputs.push(feats);
    report(
        "self-prune MLP",
        grad_check(
            |g, x| {
                let (params, f) = x.split_at(x.len() - 1);
                let p = Bound::from_vars(params.to_vec());
                let grid = FeatureGrid { height: 2, width: 2, channels: 6, scale: Scale::Coarse, values: f[0] };
                let s = head.score(g, &p, &grid)?;
                weighted_sum(g, s, &ws)
            },
            &inputs,
            H,
            TOL,
        ),
        TOL,
        &mut failures,
    );

    let mut store = ParamStore::new();
    let head = DicsHead::new(&mut store, &mut rng, "dics", 6);
    // the fresh output layer is zero; move off it so every weight matters
    randomize(&mut store, &mut rng, 0.5);
    let feats = random_tensor(&mut rng, &[5, 6], -2.0, 2.0);
    let wk = random_tensor(&mut rng, &[5, 2], -1.0, 1.0);
    let mut inputs = store.tensors().to_vec();
    inputs.push(feats);
    report(
        "DICS MLP",
        grad_check(
            |g, x| {
                let (params, f) = x.split_at(x.len() - 1);
                let p = Bound::from_vars(params.to_vec());
                let kp = head.keep_probability(g, &p, f[0])?;
                weighted_sum(g, kp, &wk)
            },
            &inputs,
            H,
            TOL,
        ),
        TOL,
        &mut failures,
    );

    let sa = random_tensor(&mut rng, &[7], 0.05, 0.95);
    let sb = random_tensor(&mut rng, &[5], 0.05, 0.95);
    let la = random_bools(&mut rng, 7);
    let lb = random_bools(&mut rng, 5);
    report(
        "self-pruning loss (cross-entropy)",
        grad_check(|g, x| self_prune_loss(g, x[0], &la, x[1], &lb), &[sa, sb], H, TOL),
        TOL,
        &mut failures,
    );

    let pa = random_tensor(&mut rng, &[7, 2], 0.05, 0.95);
    let pb = random_tensor(&mut rng, &[5, 2], 0.05, 0.95);
    report(
        "interactive-pruning loss (focal)",
        grad_check(
            |g, x| interactive_prune_loss(g, x[0], &la, x[1], &lb, Focal::default()),
            &[pa, pb],
            H,
            TOL,
        ),
        TOL,
        &mut failures,
    );

    let conf = random_tensor(&mut rng, &[4, 5], 0.05, 0.95);
    let mut gt = Tensor::zeros(&[4, 5]);
    for (i, j) in [(0, 1), (2, 3), (3, 0)] {
        gt.data[i * 5 + j] = 1.0;
    }
    report(
        "coarse matching loss",
        grad_check(|g, x| Ok(coarse_matching_loss(g, x[0], &gt, Focal::default())?.0), &[conf], H, TOL),
        TOL,
        &mut failures,
    );

    let off = random_tensor(&mut rng, &[6, 2], -2.0, 2.0);
    let target: Vec<[f64; 2]> = (0..6).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    let variance: Vec<f64> = (0..6).map(|i| if i == 0 { 0.01 } else { rng.gen_range(0.1..2.0) }).collect();
    report(
        "fine loss",
        grad_check(|g, x| fine_loss(g, x[0], &target, &variance, VARIANCE_FLOOR), &[off], H, TOL),
        TOL,
        &mut failures,
    );

    let cfg = PipelineConfig { d_c: 8, d_f: 4, n_blocks: 2, seed: 5, ..PipelineConfig::default() };
    let (model, mut params) = Model::init(&cfg).map_err(err)?;
    randomize(&mut params, &mut rng, 0.05);
    let sample = generate_pair(&SceneConfig { height: 16, width: 16, seed: 9, ..SceneConfig::default() }).map_err(err)?;
    report(
        "total loss end-to-end, 16×16 pair",
        grad_check_sampled(
            |g, x| {
                let p = Bound::from_vars(x.to_vec());
                let mut r = ChaCha8Rng::seed_from_u64(1);
                Ok(sample_loss(g, &p, &model, &cfg, &sample, Mode::Eval, &mut r)?.0)
            },
            params.tensors(),
            H,
            1e-3,
            64,
        ),
        1e-3,
        &mut failures,
    );

    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("took {secs:.1} s"));
    }
    println!("  {secs:.1} s");
    ensure(failures.is_empty(), || failures.join("; "))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let start = Instant::now();
    let n = 100_000;
    let p = Tensor::new(&[n, 2], [0.3, 0.7].repeat(n)).unwrap();
    let mut g = Graph::new();
    let pv = g.input(p);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let keep = gumbel_softmax_sample(&mut g, pv, 1.0, Mode::Train, &mut rng).map_err(err)?;
    let data = g.data(keep);
    ensure(data.iter().all(|&v| v == 0.0 || v == 1.0), || "train-mode sample is not hard".into())?;
    let rate = data.iter().sum::<f64>() / n as f64;
    ensure((rate - 0.7).abs() <= 0.01, || format!("keep rate {rate}"))?;

    let mut prng = ChaCha8Rng::seed_from_u64(4);
    let probs: Vec<f64> = (0..500).flat_map(|_| {
        let k: f64 = prng.gen_range(0.0..1.0);
        [1.0 - k, k]
    }).collect();
    let probs = Tensor::new(&[500, 2], probs).unwrap();
    let draws: Vec<Vec<f64>> = [1u64, 2, 99, 12345]
        .iter()
        .map(|&s| {
            let mut g = Graph::inference();
            let pv = g.input(probs.clone());
            let k = gumbel_softmax_sample(&mut g, pv, 1.0, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            g.data(k).to_vec()
        })
        .collect();
    ensure(draws.windows(2).all(|w| w[0] == w[1]), || "eval mode depends on the seed".into())?;
    let oracle: Vec<f64> = probs.data.chunks(2).map(|c| if c[1] >= c[0] { 1.0 } else { 0.0 }).collect();
    ensure(draws[0] == oracle, || "eval mode is not the argmax".into())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    println!("  keep rate {rate:.4} over {n} draws; eval identical across 4 seeds; {secs:.1} s");
    Ok(())
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut pruned_total = 0usize;
    let mut matches_total = 0usize;
    for trial in 0..1000u64 {
        let n_blocks = rng.gen_range(1..=4);
        let cfg = PipelineConfig {
            d_c: 8,
            d_f: 4,
            n_blocks,
            alpha: [0.3, 0.5, 0.7, 1.0][rng.gen_range(0..4)],
            dics_from_block: rng.gen_range(1..=n_blocks),
            pruning_variant: if rng.gen_bool(0.5) { PruningVariant::Implicit } else { PruningVariant::Direct },
            discard_after_prune: rng.gen_bool(0.3),
            theta_c: 0.0,
            seed: trial,
            ..PipelineConfig::default()
        };
        let (model, mut params) = Model::init(&cfg).map_err(err)?;
        // untrained heads keep nearly everything; random output layers make
        // the masks non-trivial
        for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
            if name.starts_with("dics") && name.contains(".l2.") {
                t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.5..1.5));
            }
        }
        let side = [16, 24, 32][rng.gen_range(0..3)];
        let s = generate_pair(&SceneConfig { height: side, width: side, seed: trial, ..SceneConfig::default() })
            .map_err(err)?;
        let mode = if rng.gen_bool(0.5) { Mode::Train } else { Mode::Eval };
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let mut frng = ChaCha8Rng::seed_from_u64(trial);
        let out = forward(&mut g, &p, &model, &cfg, &s.image_a, &s.image_b, mode, &mut frng).map_err(err)?;
        let ms = match_set(&mut g, &out, &cfg).map_err(err)?;

        let mut prev = [vec![true; out.k[0]], vec![true; out.k[1]]];
        for (b, t) in out.blocks.iter().enumerate() {
            for (side, m) in [&t.mask_a, &t.mask_b].into_iter().enumerate() {
                let grew = m.iter().zip(&prev[side]).any(|(&now, &before)| now && !before);
                ensure(!grew, || format!("trial {trial}: block {b} revived a candidate ({cfg:?})"))?;
                prev[side] = m.clone();
            }
        }
        let live = |cells: &[usize], mask: &[bool]| -> HashSet<usize> {
            cells.iter().zip(mask).filter(|(_, &m)| m).map(|(&c, _)| c).collect()
        };
        let live_a = live(&out.selected_a, &prev[0]);
        let live_b = live(&out.selected_b, &prev[1]);
        pruned_total += prev[0].iter().chain(&prev[1]).filter(|&&m| !m).count();
        for m in &ms.coarse {
            ensure(live_a.contains(&m.cell_a) && live_b.contains(&m.cell_b), || {
                format!("trial {trial}: pruned candidate in match ({}, {})", m.cell_a, m.cell_b)
            })?;
        }
        matches_total += ms.coarse.len();

        let n = rng.gen_range(1..=40);
        let keep = random_bools(&mut rng, n);
        let prior = random_bools(&mut rng, n);
        let mut g = Graph::inference();
        let kv = g.input(PruneMask::from_bools(&keep).values().clone());
        let pm = MaskVar::constant(&mut g, PruneMask::from_bools(&prior));
        let upd = update_mask(&mut g, kv, &pm).map_err(err)?;
        let oracle: Vec<bool> = keep.iter().zip(&prior).map(|(a, b)| *a && *b).collect();
        ensure(upd.mask.to_bools() == oracle, || format!("trial {trial}: update_mask disagrees with AND"))?;
    }
    ensure(pruned_total > 0, || "no forward pruned anything; the check is vacuous".into())?;
    println!(
        "  1000 forwards, {pruned_total} pruned candidate slots, {matches_total} matches checked; {:.1} s",
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let sides = [1usize, 2, 3, 5, 7, 8, 10, 13, 16, 33, 47, 60, 64, 79, 80];
    let mut checked = 0;
    for tenths in 1..=10usize {
        let alpha = tenths as f64 / 10.0;
        for &h in &sides {
            for &w in &sides {
                let cells = h * w;
                // round half up in exact integer arithmetic
                let expect = ((cells * tenths + 5) / 10).max(1);
                let k = selection_count(cells, alpha).map_err(err)?;
                ensure(k == expect, || format!("{h}×{w}, α={alpha}: k={k}, expected {expect}"))?;
                checked += 1;
            }
        }
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..=80), rng.gen_range(1..=80));
            // coarse quantization forces ties
            let scores: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_range(0..16u8)) / 16.0).collect();
            let mut g = Graph::inference();
            let grid = FeatureGrid {
                height: h,
                width: w,
                channels: 1,
                scale: Scale::Coarse,
                values: g.input(Tensor::zeros(&[h * w, 1])),
            };
            let sv = g.input(Tensor::new(&[h * w], scores.clone()).unwrap());
            let set = topk_select(&mut g, &grid, sv, alpha, Side::A).map_err(err)?;
            let chosen: HashSet<usize> = set.grid_indices.iter().copied().collect();
            ensure(chosen.len() == ((h * w * tenths + 5) / 10).max(1), || "wrong selection size".into())?;
            let min_sel = chosen.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            let max_un = (0..h * w).filter(|i| !chosen.contains(i)).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
            ensure(min_sel >= max_un, || format!("{h}×{w}, α={alpha}: selected min {min_sel} < unselected max {max_un}"))?;
        }
    }
    // default ratio, and the two published ratios on a 480×640 image: k = 60·80·α
    ensure(PipelineConfig::default().alpha == 0.5, || "default α is not 0.5".into())?;
    ensure(selection_count(60 * 80, 0.5).map_err(err)? == 2400, || "α=0.5 anchor".into())?;
    ensure(selection_count(60 * 80, 0.7).map_err(err)? == 3360, || "α=0.7 anchor".into())?;
    ensure(selection_count(64, 0.7).map_err(err)? == 45, || "α=0.7 on 8×8".into())?;
    println!("  {checked} (grid, α) counts exact; 200 random top-k selections ordered; anchors 2400/3360 at 60×80");
    Ok(())
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let w = PipelineConfig::default().weights();
    ensure(
        w == LossWeights { sprune: 0.5, iprune: 0.3, coarse: 1.0, fine: 1.0 } && w == LossWeights::default(),
        || format!("weights {w:?}"),
    )?;
    let mut g = Graph::inference();
    let terms = [1.0, 2.0, 4.0, 8.0].map(|v| g.input(Tensor::scalar(v)));
    let (t, _) = total_loss(
        &mut g,
        LossTerms { sprune: terms[0], iprune: terms[1], coarse: terms[2], fine: terms[3] },
        w,
    )
    .map_err(err)?;
    ensure(g.scalar(t) == 0.5 + 0.6 + 4.0 + 8.0, || format!("total {}", g.scalar(t)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..30);
        let keep: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels = random_bools(&mut rng, n);
        let mut g = Graph::inference();
        let p = g.input(Tensor::new(&[n, 2], keep.iter().flat_map(|&k| [1.0 - k, k]).collect()).unwrap());
        let s = g.input(Tensor::new(&[n], keep.clone()).unwrap());
        let f = focal_loss(&mut g, p, &labels, Focal { gamma: 0.0, alpha: 1.0 }).map_err(err)?;
        let ce = binary_cross_entropy(&mut g, s, &labels).map_err(err)?;
        let oracle = -keep.iter().zip(&labels).map(|(&k, &l)| if l { k.ln() } else { (1.0 - k).ln() }).sum::<f64>() / n as f64;
        worst = worst.max((g.scalar(f) - g.scalar(ce)).abs()).max((g.scalar(f) - oracle).abs());
    }
    ensure(worst <= 1e-12, || format!("focal(γ=0, α=1) vs CE differ by {worst:e}"))?;

    let labels = [true, false, true, true, false];
    let mut g = Graph::inference();
    let s = g.input(Tensor::new(&[5], labels.iter().map(|&l| f64::from(u8::from(l))).collect()).unwrap());
    let p = g.input(Tensor::new(&[5, 2], labels.iter().flat_map(|&l| if l { [0.0, 1.0] } else { [1.0, 0.0] }).collect()).unwrap());
    let mut gt = Tensor::zeros(&[3, 4]);
    for (i, j) in [(0, 2), (1, 0), (2, 3)] {
        gt.data[i * 4 + j] = 1.0;
    }
    let conf = g.input(gt.clone());
    let target = [[0.5, -1.0], [1.25, 0.0]];
    let off = g.input(Tensor::new(&[2, 2], vec![0.5, -1.0, 1.25, 0.0]).unwrap());
    let l_s = self_prune_loss(&mut g, s, &labels, s, &labels).map_err(err)?;
    let l_i = interactive_prune_loss(&mut g, p, &labels, p, &labels, Focal::default()).map_err(err)?;
    let (l_c, _) = coarse_matching_loss(&mut g, conf, &gt, Focal::default()).map_err(err)?;
    let l_f = fine_loss(&mut g, off, &target, &[0.3, 0.7], VARIANCE_FLOOR).map_err(err)?;
    let (total, _) = total_loss(&mut g, LossTerms { sprune: l_s, iprune: l_i, coarse: l_c, fine: l_f }, w).map_err(err)?;
    let values = [l_s, l_i, l_c, l_f, total].map(|v| g.scalar(v));
    ensure(values.iter().all(|v| v.abs() < 1e-6), || format!("perfect-prediction losses {values:?}"))?;
    println!("  weights 0.5/0.3/1/1; focal(γ=0,α=1) − CE ≤ {worst:.1e}; perfect losses max {:.1e}", values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    Ok(())
}

// ---------------------------------------------------------------- 7

/// A trained model and its run configuration.
struct Trained {
    run: RunConfig,
    model: Model,
    params: ParamStore,
    secs: f64,
}

fn train_run(run: RunConfig, dir: &Path) -> std::result::Result<Trained, String> {
    let start = Instant::now();
    let o = train::train(&run, dir, |_| {}).map_err(err)?;
    Ok(Trained { run, model: o.model, params: o.params, secs: start.elapsed().as_secs_f64() })
}

/// Mean eval-mode loss over the first `n` training batches.
fn fixed_set_loss(t: &Trained, params: ParamStore, n: usize) -> std::result::Result<f64, String> {
    let trainer = Trainer::from_params(t.run.pipeline, t.run.scene, t.model.clone(), params).map_err(err)?;
    let mut sum = 0.0;
    for s in 0..n {
        sum += trainer.evaluate_loss(s).map_err(err)?.total;
    }
    Ok(sum / n as f64)
}

struct Runs {
    dir: tempfile::TempDir,
    pruned: Option<Trained>,
    baseline: Option<Trained>,
}

impl Runs {
    fn trained(&mut self) -> std::result::Result<(&Trained, &Trained), String> {
        if self.pruned.is_none() {
            self.pruned = Some(train_run(RunConfig::default(), &self.dir.path().join("pruned"))?);
        }
        if self.baseline.is_none() {
            let run = RunConfig { pipeline: PipelineConfig::baseline(), ..RunConfig::default() };
            self.baseline = Some(train_run(run, &self.dir.path().join("baseline"))?);
        }
        Ok((self.pruned.as_ref().unwrap(), self.baseline.as_ref().unwrap()))
    }
}

const LOSS_PAIRS: usize = 32;

fn criterion_7(runs: &mut Runs) -> Check {
    let start = Instant::now();
    let (pruned, base) = runs.trained()?;
    let mut failures = Vec::new();
    for (label, t) in [("pruned", pruned), ("baseline", base)] {
        let (_, init) = Model::init(&t.run.pipeline).map_err(err)?;
        let before = fixed_set_loss(t, init, LOSS_PAIRS)?;
        let after = fixed_set_loss(t, t.params.clone(), LOSS_PAIRS)?;
        println!(
            "  {label}: {} steps in {:.0} s; loss on the first {LOSS_PAIRS} training pairs {before:.4} → {after:.4} ({:.1}%)",
            t.run.pipeline.steps,
            t.secs,
            100.0 * after / before
        );
        if !(after < 0.5 * before) {
            failures.push(format!("{label} loss {after:.4} is not below half of {before:.4}"));
        }
    }
    let scene = pruned.run.eval_scene();
    let n = pruned.run.eval_pairs;
    let (_, id_p) = eval::evaluate(&pruned.model, &pruned.params, &pruned.run.pipeline, identity_scene(scene), n).map_err(err)?;
    let (_, id_b) = eval::evaluate(&base.model, &base.params, &base.run.pipeline, identity_scene(scene), n).map_err(err)?;
    let (_, w_p) = eval::evaluate(&pruned.model, &pruned.params, &pruned.run.pipeline, scene, n).map_err(err)?;
    let (_, w_b) = eval::evaluate(&base.model, &base.params, &base.run.pipeline, scene, n).map_err(err)?;
    println!(
        "  identity pairs: pruned {:.1}% identity of {:.1} matches/pair, baseline {:.1}% of {:.1}",
        100.0 * id_p.identity_fraction,
        id_p.mean_coarse_matches,
        100.0 * id_b.identity_fraction,
        id_b.mean_coarse_matches
    );
    println!(
        "  warped pairs: AUC@3/5/10 pruned {:.3}/{:.3}/{:.3}, baseline {:.3}/{:.3}/{:.3}; live per block {:?}",
        w_p.auc_3, w_p.auc_5, w_p.auc_10, w_b.auc_3, w_b.auc_5, w_b.auc_10, w_p.mean_live_per_block
    );
    if id_p.identity_fraction < 0.9 {
        failures.push(format!("identity fraction {:.3} < 0.9", id_p.identity_fraction));
    }
    let gap = (w_p.auc_10 - w_b.auc_10).abs();
    if gap > 0.05 {
        failures.push(format!("AUC@10 gap {gap:.3} > 0.05"));
    }
    let secs = start.elapsed().as_secs_f64();
    println!("  {secs:.0} s");
    if secs >= 1800.0 {
        failures.push(format!("took {secs:.0} s"));
    }
    ensure(failures.is_empty(), || failures.join("; "))
}

// ---------------------------------------------------------------- 8

fn criterion_8(runs: &mut Runs) -> Check {
    let (pruned, base) = runs.trained()?;
    let direct = PipelineConfig { pruning_variant: PruningVariant::Direct, ..pruned.run.pipeline };
    let (a, b) = bench::bench_pair(1024, pruned.run.scene.seed).map_err(err)?;
    let (h, w) = (a.shape[0], a.shape[1]);
    let flops = |m: &Model, p: &ParamStore, c: &PipelineConfig| -> std::result::Result<_, String> {
        let (_, out) = predict(m, p, c, &a, &b).map_err(err)?;
        Ok(count_flops(c, &Workload::from_forward(&out, h, w), p.count()))
    };
    let fp = flops(&pruned.model, &pruned.params, &direct)?;
    let fb = flops(&base.model, &base.params, &base.run.pipeline)?;
    let ratio = fp.sc_total() as f64 / fb.sc_total() as f64;
    println!(
        "  N=1024: SC FLOPs direct α=0.5 {} vs baseline {} ({:.1}%), total {} vs {}",
        fp.sc_total(),
        fb.sc_total(),
        100.0 * ratio,
        fp.total,
        fb.total
    );
    let tp = bench::time_pipeline(&pruned.model, &pruned.params, &direct, &a, &b, 50, 3).map_err(err)?;
    let tb = bench::time_pipeline(&base.model, &base.params, &base.run.pipeline, &a, &b, 50, 3).map_err(err)?;
    let ti = bench::time_pipeline(&pruned.model, &pruned.params, &pruned.run.pipeline, &a, &b, 50, 3).map_err(err)?;
    let ms = |t: &bench::TimingReport| t.total_median_ns() / 1e6;
    println!(
        "  50-run medians: direct {:.1} ms, implicit {:.1} ms, baseline {:.1} ms",
        ms(&tp),
        ms(&ti),
        ms(&tb)
    );
    ensure(ratio <= 0.55, || format!("SC FLOP ratio {ratio:.3} > 0.55"))?;
    ensure(ms(&tp) < ms(&tb), || format!("pruned {:.1} ms is not faster than baseline {:.1} ms", ms(&tp), ms(&tb)))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    let mut points = 0usize;
    for i in 0..1000u64 {
        let s = generate_pair(&SceneConfig { seed: 9_000 + i, ..SceneConfig::default() }).map_err(err)?;
        let hom = s.homography.ok_or("planar sample without homography")?;
        let (h, w) = (s.height() as f64, s.width() as f64);
        let pts: Vec<[f64; 2]> = (0..32).map(|_| [rng.gen_range(0.0..w - 1.0), rng.gen_range(0.0..h - 1.0)]).collect();
        let warped = s.view(Side::A).warp(&pts).map_err(err)?;
        for (p, wp) in pts.iter().zip(&warped) {
            // only points on the plane have the plane's homography
            if depth_at(&s.depth_a, *p) <= 0.0 {
                continue;
            }
            let q = apply_homography(&hom, *p).ok_or("point at infinity")?;
            worst = worst.max((q[0] - wp.point[0]).abs()).max((q[1] - wp.point[1]).abs());
            points += 1;
        }
        for side in [Side::A, Side::B] {
            let pw = covisible_cells(&s, side, CovisMode::Pointwise).map_err(err)?;
            let bb = covisible_cells(&s, side, CovisMode::Bbox).map_err(err)?;
            ensure(pw.iter().zip(&bb).all(|(&p, &b)| !p || b), || format!("sample {i}: bbox misses a pointwise cell"))?;
        }
    }
    ensure(worst <= 1e-6, || format!("warp vs homography differ by {worst:e} px"))?;

    for i in 0..100u64 {
        let base = SceneConfig { seed: 7_000 + i, ..SceneConfig::default() };
        for scene in [identity_scene(base), identity_scene(SceneConfig { invalid_depth_fraction: 0.0, ..base })] {
            let s = generate_pair(&scene).map_err(err)?;
            let valid = depth_validity(&s.depth_a).map_err(err)?;
            for mode in [CovisMode::Pointwise, CovisMode::Bbox] {
                let cov = covisible_cells(&s, Side::A, mode).map_err(err)?;
                ensure(cov == valid, || format!("identity sample {i}: co-visibility is not every valid cell ({mode:?})"))?;
            }
            if scene.invalid_depth_fraction == 0.0 {
                ensure(valid.iter().all(|&v| v), || "hole-free scene has invalid cells".into())?;
            }
        }
    }
    println!("  {points} on-plane points within {worst:.1e} px; bbox ⊇ pointwise on 1000 samples; identity co-visibility total on 200");
    Ok(())
}

// ---------------------------------------------------------------- 10

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The four supervision × discard regimes, then the component ablations.
/// `full` is both the last-block/keep regime and the implicit row.
const REGIMES: [&str; 8] = [
    "full",
    "supervise_all",
    "discard",
    "supervise_all_discard",
    "no_self_pruning",
    "no_interactive_pruning",
    "direct",
    "baseline",
];

fn criterion_10(runs: &mut Runs) -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut logs: Vec<(&str, String)> = Vec::new();
    for name in REGIMES {
        let path = configs_dir().join(format!("{name}.json"));
        let mut run = config::load(Some(&path), &[], None).map_err(|e| format!("{name}: {e}"))?;
        run.pipeline.steps = 6;
        run.log_every = 1;
        let out = dir.path().join(name);
        train::train(&run, &out, |_| {}).map_err(|e| format!("{name}: {e}"))?;
        logs.push((name, std::fs::read_to_string(out.join(train::METRICS)).map_err(err)?));
    }
    for (i, (a, la)) in logs.iter().enumerate() {
        for (b, lb) in &logs[i + 1..] {
            ensure(la != lb, || format!("{a} and {b} produced identical metric logs"))?;
        }
    }

    let (pruned, _) = runs.trained()?;
    let load = |name: &str| config::load(Some(&configs_dir().join(format!("{name}.json"))), &[], None);
    let implicit = load("full").map_err(err)?.pipeline;
    let direct = load("direct").map_err(err)?.pipeline;
    let mut totals = [0u64; 2];
    for i in 0..20u64 {
        let s = generate_pair(&SceneConfig { seed: 55_000 + i, ..pruned.run.scene }).map_err(err)?;
        for (slot, c) in [implicit, direct].iter().enumerate() {
            let (_, out) = predict(&pruned.model, &pruned.params, c, &s.image_a, &s.image_b).map_err(err)?;
            totals[slot] += count_flops(c, &Workload::from_forward(&out, s.height(), s.width()), pruned.params.count()).total;
        }
    }
    println!(
        "  {} regimes ran from config files with distinct logs; FLOPs over 20 pairs: direct {} < implicit {}",
        REGIMES.len(),
        totals[1],
        totals[0]
    );
    ensure(totals[1] < totals[0], || format!("direct {} is not below implicit {}", totals[1], totals[0]))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut runs = Runs { dir: tempfile::tempdir().expect("temp dir"), pruned: None, baseline: None };
    let mut failed = 0;
    let mut ran = 0;
    for n in 1..=10 {
        if !run(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut runs),
            8 => criterion_8(&mut runs),
            9 => criterion_9(),
            _ => criterion_10(&mut runs),
        };
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64());
        ran += 1;
        match result {
            Ok(()) => println!("criterion {n}: PASS ({took:.1?})"),
            Err(e) => {
                failed += 1;
                println!("criterion {n}: FAIL ({took:.1?}): {e}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
