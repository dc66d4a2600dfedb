// Temporary calibration harness for the desk-scale experiments.
use std::time::Instant;

use subtune::data::{gen_source_task, make_shift, subsample, ShiftKind, ShiftSpec};
use subtune::model::{BlockNetwork, SubsetSpec};
use subtune::nn::BlockId;
use subtune::train::{evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("pretrain");

    let d = 32;
    let classes = 10;
    let n = 20_000;
    let warp: usize = std::env::var("CALIB_WARP").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let seed = 7;

    let t0 = Instant::now();
    let source = gen_source_task(d, classes, n, warp, seed).unwrap();
    println!("source gen: {:?}", t0.elapsed());

    match mode {
        "pretrain" => {
            for (epochs, lr, batch) in [(10usize, 1e-3, 128usize), (20, 1e-3, 128), (20, 3e-3, 128)] {
                let t = Instant::now();
                let mut net = BlockNetwork::build(d, 8, classes, 1).unwrap();
                let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
                net.set_trainable(&all).unwrap();
                let cfg = TrainConfig {
                    lr,
                    weight_decay: 0.01,
                    batch_size: batch,
                    epochs,
                    seed: 2,
                };
                let rec = train(&mut net, &source, &cfg).unwrap();
                println!(
                    "pretrain epochs={epochs} lr={lr}: train acc {:.4} loss {:.4} in {:?}",
                    rec.accuracy, rec.loss, t.elapsed()
                );
            }
            // linear baseline on raw source: is the warp nonlinear enough?
            let mut lin = BlockNetwork::build(d, 1, classes, 3).unwrap();
            lin.set_trainable(&SubsetSpec::empty()).unwrap();
            let sub = subsample(&source, 4000, true, 1).unwrap();
            let cfg = TrainConfig {
                lr: 0.01,
                weight_decay: 0.0,
                batch_size: 128,
                epochs: 30,
                seed: 2,
            };
            let rec = train(&mut lin, &sub, &cfg).unwrap();
            println!("linear-ish baseline (head-only on raw): acc {:.4}", rec.accuracy);
        }
        "shift" => {
            // pretrain once
            let mut net = BlockNetwork::build(d, 8, classes, 1).unwrap();
            let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
            net.set_trainable(&all).unwrap();
            let cfg = TrainConfig {
                lr: 1e-3,
                weight_decay: 0.01,
                batch_size: 128,
                epochs: 20,
                seed: 2,
            };
            let rec = train(&mut net, &source, &cfg).unwrap();
            net.refresh_snapshot();
            println!("pretrained: source train acc {:.4}", rec.accuracy);

            for kind in ShiftKind::ALL {
                for sev in [3u8, 5] {
                    let spec = ShiftSpec::new(kind, sev, 11).unwrap();
                    let task = make_shift(&source, &spec, 0.1).unwrap();
                    let test = subsample(&task.test, 2000, true, 3).unwrap();
                    let clean = evaluate(&net, &test).unwrap();
                    println!(
                        "{:>15} sev {sev}: pretrained acc on shifted test {:.4}",
                        kind.as_str(),
                        clean.accuracy
                    );
                }
            }
        }
        "c7w" => {
            // warm-start protocol: keep the pretrained head everywhere
            let kind: ShiftKind = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(ShiftKind::GaussianNoise);
            let sev: u8 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5);
            let m: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100);
            let n_seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);
            let kmax: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2);
            let eps: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.01);

            let mut net = BlockNetwork::build(d, 8, classes, 1).unwrap();
            let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
            net.set_trainable(&all).unwrap();
            let pre_epochs: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(20);
            let sel_epochs: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(25);
            let pre_cfg = TrainConfig { lr: 3e-3, weight_decay: 0.01, batch_size: 128, epochs: pre_epochs, seed: 2 };
            let pre_rec = train(&mut net, &source, &pre_cfg).unwrap();
            net.refresh_snapshot();

            let spec = ShiftSpec::new(kind, sev, 11).unwrap();
            let task = make_shift(&source, &spec, 0.1).unwrap();
            let test = subsample(&task.test, 2000, true, 3).unwrap();
            println!("{} sev{sev}: pretrain {:.4} zero-shot {:.4}", kind.as_str(), pre_rec.accuracy, evaluate(&net, &test).unwrap().accuracy);

            use subtune::select::{greedy_subtune, CvEvaluator, GreedyOptions};
            use subtune::train::{lr_sweep_with_policy, HeadPolicy};
            let warm = HeadPolicy::WarmStart;
            const SWEEP_LRS: [f64; 6] = [5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5];
            let sweep_train = |subset: &SubsetSpec, target: &subtune::data::Dataset, seed: u64| {
                let base = TrainConfig { lr: 1e-3, weight_decay: 0.01, batch_size: 32, epochs: 50, seed: 500 + seed };
                let (best_lr, _) = lr_sweep_with_policy(&net, subset, target, &SWEEP_LRS, &base, 3, warm).unwrap();
                let mut t = net.clone();
                t.set_trainable(subset).unwrap();
                train(&mut t, target, &base.with_lr(best_lr)).unwrap();
                (evaluate(&t, &test).unwrap().accuracy, best_lr)
            };

            let mut rows: Vec<(f64, f64, f64)> = Vec::new();
            for seed in 0..n_seeds {
                let t0 = Instant::now();
                let target = subsample(&task.train, m, true, 1000 + seed).unwrap();
                let (lp_acc, lp_lr) = sweep_train(&SubsetSpec::empty(), &target, seed);
                let ft_all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
                let (ft_acc, ft_lr) = sweep_train(&ft_all, &target, seed);
                let sel_cfg = TrainConfig { lr: 1e-3, weight_decay: 0.01, batch_size: 32, epochs: sel_epochs, seed: 500 + seed };
                let evaluator = CvEvaluator::with_policy(&net, &target, sel_cfg, 5, warm);
                let opts = GreedyOptions { epsilon: eps, k_max: Some(kmax), ..GreedyOptions::default() };
                let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
                let (gs_acc, gs_lr) = sweep_train(&trace.final_subset, &target, seed);
                println!(
                    "seed {seed}: lp {:.4}@{lp_lr} ft {:.4}@{ft_lr} greedy {:.4}@{gs_lr} [{}] in {:?}",
                    lp_acc, ft_acc, gs_acc, trace.final_subset.render(), t0.elapsed()
                );
                rows.push((lp_acc, ft_acc, gs_acc));
            }
            let k = rows.len() as f64;
            let (lp, ft, gs) = (
                rows.iter().map(|r| r.0).sum::<f64>() / k,
                rows.iter().map(|r| r.1).sum::<f64>() / k,
                rows.iter().map(|r| r.2).sum::<f64>() / k,
            );
            println!("MEANS {} sev{sev} m={m}: lp {lp:.4} ft {ft:.4} greedy {gs:.4}  (gs-lp {:.4}, gs-ft {:.4})",
                kind.as_str(), gs - lp, gs - ft);
        }
        "rest" => {
            // criteria 9 (reinit), 12 (prune), 10 (AL), 11 (gap) calibration
            let which = args.get(2).map(|s| s.as_str()).unwrap_or("c9");
            let rkind: ShiftKind = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(ShiftKind::Smooth);
            let rsev: u8 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5);
            let mut net = BlockNetwork::build(d, 8, classes, 1).unwrap();
            let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
            net.set_trainable(&all).unwrap();
            let pre_cfg = TrainConfig { lr: 3e-3, weight_decay: 0.01, batch_size: 128, epochs: 30, seed: 2 };
            train(&mut net, &source, &pre_cfg).unwrap();
            net.refresh_snapshot();
            let spec = ShiftSpec::new(rkind, rsev, 11).unwrap();
            let task = make_shift(&source, &spec, 0.1).unwrap();
            let test = subsample(&task.test, 2000, true, 3).unwrap();
            println!("{} sev{rsev} zero-shot {:.4}", rkind.as_str(), evaluate(&net, &test).unwrap().accuracy);

            match which {
                "c9" => {
                    // pretrained-init vs random-reinit subtuning, same subset/epochs
                    let ids = [BlockId(1), BlockId(2)];
                    let subset = SubsetSpec::for_network(&net, &ids).unwrap();
                    let mut gaps = Vec::new();
                    for seed in 0..5u64 {
                        let target = subsample(&task.train, 100, true, 1000 + seed).unwrap();
                        let cfg = TrainConfig { lr: 1e-3, weight_decay: 0.01, batch_size: 32, epochs: 50, seed: 500 + seed };
                        let mut pre = net.clone();
                        pre.set_trainable(&subset).unwrap();
                        train(&mut pre, &target, &cfg).unwrap();
                        let pre_acc = evaluate(&pre, &test).unwrap().accuracy;

                        let mut re = net.clone();
                        re.set_trainable(&subset).unwrap();
                        re.reinit_blocks(&subset, 7000 + seed).unwrap();
                        train(&mut re, &target, &cfg).unwrap();
                        let re_acc = evaluate(&re, &test).unwrap().accuracy;
                        println!("seed {seed}: pretrained {pre_acc:.4} reinit {re_acc:.4} gap {:.4}", pre_acc - re_acc);
                        gaps.push(pre_acc - re_acc);
                    }
                    println!("mean gap: {:.4}", gaps.iter().sum::<f64>() / gaps.len() as f64);
                }
                "c12" => {
                    use subtune::prune::{apply_prune, prune_plan, PruneNorm, PruneScope, PruneSpec};
                    for blocks in [[1usize, 2, 3], [6, 7, 8]] {
                        let ids: Vec<BlockId> = blocks.iter().map(|&i| BlockId(i)).collect();
                        let subset = SubsetSpec::for_network(&net, &ids).unwrap();
                        let pspec = PruneSpec {
                            scope: PruneScope::Local,
                            norm: PruneNorm::L1,
                            sparsity: 0.9,
                            target_blocks: subset.clone(),
                        };
                        let plan = prune_plan(&net, &pspec).unwrap();
                        let pruned = apply_prune(&net, &plan).unwrap();
                        let kept = pruned.blocks()[blocks[0] - 1].param_count() as f64
                            / net.blocks()[blocks[0] - 1].param_count() as f64;
                        let mut accs = (0.0, 0.0);
                        for seed in 0..5u64 {
                            let target = subsample(&task.train, 100, true, 1000 + seed).unwrap();
                            let cfg = TrainConfig { lr: 5e-3, weight_decay: 0.01, batch_size: 32, epochs: 50, seed: 500 + seed };
                            let mut ps = pruned.clone();
                            ps.set_trainable(&SubsetSpec::for_network(&ps, &ids).unwrap()).unwrap();
                            train(&mut ps, &target, &cfg).unwrap();
                            accs.0 += evaluate(&ps, &test).unwrap().accuracy / 5.0;
                            let mut lp = net.clone();
                            lp.set_trainable(&SubsetSpec::empty()).unwrap();
                            train(&mut lp, &target, &cfg).unwrap();
                            accs.1 += evaluate(&lp, &test).unwrap().accuracy / 5.0;
                        }
                        println!("prune {blocks:?} kept {:.3}: pruned-subtune {:.4} lp {:.4} diff {:.4}",
                            kept, accs.0, accs.1, accs.0 - accs.1);
                    }
                }
                "c10" => {
                    use subtune::active::{al_loop, ALConfig, LabeledPool, Strategy};
                    let ids = [BlockId(1), BlockId(2)];
                    let subset = SubsetSpec::for_network(&net, &ids).unwrap();
                    let budgets = vec![50usize, 100, 200, 400];
                    let mut margin_sum = vec![0.0; budgets.len() + 1];
                    let mut random_sum = vec![0.0; budgets.len() + 1];
                    for seed in 0..5u64 {
                        for (strategy, sums) in [
                            (Strategy::Margin, &mut margin_sum),
                            (Strategy::Random, &mut random_sum),
                        ] {
                            let mut pool = LabeledPool::new(task.train.clone());
                            let cfg = ALConfig {
                                initial_random: 20,
                                budgets: budgets.clone(),
                                strategy,
                                seed: 3000 + seed,
                                train: TrainConfig { lr: 1e-3, weight_decay: 0.01, batch_size: 32, epochs: 15, seed: 600 + seed },
                            };
                            let curve = al_loop(&net, &mut pool, &subset, &test, &cfg).unwrap();
                            for (i, p) in curve.iter().enumerate() {
                                sums[i] += p.test_accuracy / 5.0;
                            }
                        }
                    }
                    println!("budget:  20 {:?}", budgets);
                    println!("margin: {:?}", margin_sum.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
                    println!("random: {:?}", random_sum.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
                }
                "c11" => {
                    use subtune::select::{gap_experiment, GapExperimentConfig};
                    use subtune::util::{mean as umean, spearman_rho};
                    let cfg = GapExperimentConfig {
                        subset_sizes: vec![0, 1, 2, 4, 8],
                        delta: 2.0,
                        m: 80,
                        seeds: vec![0, 1, 2, 3, 4],
                        train: TrainConfig { lr: 5e-3, weight_decay: 0.01, batch_size: 32, epochs: 30, seed: 0 },
                        cv_k: 5,
                    };
                    let t0 = Instant::now();
                    let records = gap_experiment(&net, &task.train, &test, &cfg).unwrap();
                    let mut by_size: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
                    for r in &records {
                        by_size.entry(r.r_prime).or_default().push(r.gap);
                    }
                    let sqrt_r: Vec<f64> = by_size.keys().map(|&r| (r as f64).sqrt()).collect();
                    let gaps: Vec<f64> = by_size.values().map(|v| umean(v)).collect();
                    println!("r'={:?}", by_size.keys().collect::<Vec<_>>());
                    println!("mean gaps={gaps:?}");
                    println!("spearman rho = {:.4} in {:?}", spearman_rho(&sqrt_r, &gaps), t0.elapsed());
                }
                _ => eprintln!("unknown sub-mode"),
            }
        }
        "prof" => {
            // ground-truth single-block profiles per shift kind at small m,
            // holdout-scored on a large test split
            let m: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
            let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
            let mut net = BlockNetwork::build(d, 8, classes, 1).unwrap();
            let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
            net.set_trainable(&all).unwrap();
            let pre_cfg = TrainConfig { lr: 3e-3, weight_decay: 0.01, batch_size: 128, epochs: 20, seed: 2 };
            train(&mut net, &source, &pre_cfg).unwrap();
            net.refresh_snapshot();

            use subtune::select::{finetune_profile, ProfileEval};
            for (kind, sev) in [
                (ShiftKind::GaussianNoise, 5u8),
                (ShiftKind::Impulse, 5),
                (ShiftKind::Smooth, 3),
                (ShiftKind::Smooth, 5),
                (ShiftKind::Quantize, 5),
                (ShiftKind::LabelPermute, 3),
            ] {
                let spec = ShiftSpec::new(kind, sev, 11).unwrap();
                let task = make_shift(&source, &spec, 0.1).unwrap();
                let test = subsample(&task.test, 2000, true, 3).unwrap();
                let target = subsample(&task.train, m, true, 1000).unwrap();
                let cfg = TrainConfig { lr, weight_decay: 0.01, batch_size: 32, epochs: 50, seed: 5 };
                let lp = {
                    let mut t = net.clone();
                    t.attach_head(t.head_kind(), classes, 900).unwrap();
                    t.set_trainable(&SubsetSpec::empty()).unwrap();
                    train(&mut t, &target, &cfg).unwrap();
                    evaluate(&t, &test).unwrap().accuracy
                };
                let prof = finetune_profile(
                    &net, &target, 1,
                    ProfileEval::Holdout { test: &test },
                    &cfg, &[5, 6],
                ).unwrap();
                let accs: Vec<String> = prof.entries.iter().map(|e| format!("{:.3}", e.mean_acc)).collect();
                let argmax = prof.entries.iter().enumerate()
                    .max_by(|a, b| a.1.mean_acc.partial_cmp(&b.1.mean_acc).unwrap()).unwrap().0 + 1;
                println!(
                    "{:>15} sev{sev} m={m} lr={lr}: lp {:.3} | profile [{}] argmax=block{argmax}",
                    kind.as_str(), lp, accs.join(" ")
                );
            }
        }
        "c7s" => {
            // full shift protocol with per-method lr sweeps
            let kind: ShiftKind = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(ShiftKind::Impulse);
            let sev: u8 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5);
            let m: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100);
            let n_seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);

            let mut net = BlockNetwork::build(d, 8, classes, 1).unwrap();
            let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
            net.set_trainable(&all).unwrap();
            let pre_cfg = TrainConfig { lr: 3e-3, weight_decay: 0.01, batch_size: 128, epochs: 20, seed: 2 };
            train(&mut net, &source, &pre_cfg).unwrap();
            net.refresh_snapshot();

            let spec = ShiftSpec::new(kind, sev, 11).unwrap();
            let task = make_shift(&source, &spec, 0.1).unwrap();
            let test = subsample(&task.test, 2000, true, 3).unwrap();
            println!("{} sev{sev}: zero-shot {:.4}", kind.as_str(),
                evaluate(&net, &test).unwrap().accuracy);

            use subtune::select::{greedy_subtune, CvEvaluator, GreedyOptions};
            use subtune::train::lr_sweep;
            let grid = [1e-2, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5];
            let sweep_train = |subset: &SubsetSpec, target: &subtune::data::Dataset, seed: u64| {
                let base = TrainConfig { lr: 1e-3, weight_decay: 0.01, batch_size: 32, epochs: 50, seed: 500 + seed };
                let (best_lr, _) = lr_sweep(&net, subset, target, &grid, &base, 3).unwrap();
                let mut t = net.clone();
                t.attach_head(t.head_kind(), classes, 900 + seed).unwrap();
                t.set_trainable(subset).unwrap();
                train(&mut t, target, &base.with_lr(best_lr)).unwrap();
                (evaluate(&t, &test).unwrap().accuracy, best_lr)
            };

            let mut rows: Vec<(f64, f64, f64)> = Vec::new();
            for seed in 0..n_seeds {
                let t0 = Instant::now();
                let target = subsample(&task.train, m, true, 1000 + seed).unwrap();
                let (lp_acc, lp_lr) = sweep_train(&SubsetSpec::empty(), &target, seed);
                let ft_all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
                let (ft_acc, ft_lr) = sweep_train(&ft_all, &target, seed);
                let sel_cfg = TrainConfig { lr: 1e-3, weight_decay: 0.01, batch_size: 32, epochs: 25, seed: 500 + seed };
                let evaluator = CvEvaluator::new(&net, &target, sel_cfg, 5);
                let opts = GreedyOptions { k_max: Some(4), ..GreedyOptions::default() };
                let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
                let (gs_acc, gs_lr) = sweep_train(&trace.final_subset, &target, seed);
                println!(
                    "seed {seed}: lp {:.4}@{lp_lr} ft {:.4}@{ft_lr} greedy {:.4}@{gs_lr} [{}] in {:?}",
                    lp_acc, ft_acc, gs_acc, trace.final_subset.render(), t0.elapsed()
                );
                rows.push((lp_acc, ft_acc, gs_acc));
            }
            let k = rows.len() as f64;
            println!(
                "MEANS {} sev{sev} m={m}: lp {:.4} ft {:.4} greedy {:.4}",
                kind.as_str(),
                rows.iter().map(|r| r.0).sum::<f64>() / k,
                rows.iter().map(|r| r.1).sum::<f64>() / k,
                rows.iter().map(|r| r.2).sum::<f64>() / k,
            );
        }
        "c7" => {
            let kind: ShiftKind = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(ShiftKind::Impulse);
            let sev: u8 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5);
            let m: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100);

            let mut net = BlockNetwork::build(d, 8, classes, 1).unwrap();
            let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
            net.set_trainable(&all).unwrap();
            let pre_cfg = TrainConfig {
                lr: 3e-3,
                weight_decay: 0.01,
                batch_size: 128,
                epochs: 20,
                seed: 2,
            };
            let rec = train(&mut net, &source, &pre_cfg).unwrap();
            net.refresh_snapshot();
            println!("pretrained acc {:.4}", rec.accuracy);

            let spec = ShiftSpec::new(kind, sev, 11).unwrap();
            let task = make_shift(&source, &spec, 0.1).unwrap();
            let test = subsample(&task.test, 2000, true, 3).unwrap();
            println!("zero-shot on shifted test: {:.4}", evaluate(&net, &test).unwrap().accuracy);

            use subtune::select::{greedy_subtune, CvEvaluator, GreedyOptions};

            let mut summary: Vec<(f64, f64, f64, String)> = Vec::new();
            for seed in 0..5u64 {
                let t = Instant::now();
                let target = subsample(&task.train, m, true, 1000 + seed).unwrap();
                let final_cfg = TrainConfig {
                    lr: 1e-3,
                    weight_decay: 0.01,
                    batch_size: 32,
                    epochs: 50,
                    seed: 500 + seed,
                };
                // linear probe at its protocol lr
                let lp_cfg = TrainConfig { lr: 0.01, ..final_cfg.clone() };
                let mut lp = net.clone();
                lp.attach_head(lp.head_kind(), classes, 900 + seed).unwrap();
                lp.set_trainable(&SubsetSpec::empty()).unwrap();
                train(&mut lp, &target, &lp_cfg).unwrap();
                let lp_acc = evaluate(&lp, &test).unwrap().accuracy;

                // full finetuning
                let mut ft = net.clone();
                ft.attach_head(ft.head_kind(), classes, 900 + seed).unwrap();
                let allb = SubsetSpec::for_network(&ft, &ft.block_ids()).unwrap();
                ft.set_trainable(&allb).unwrap();
                train(&mut ft, &target, &final_cfg).unwrap();
                let ft_acc = evaluate(&ft, &test).unwrap().accuracy;

                // greedy subtune: selection on shorter schedule, final on full
                let sel_cfg = TrainConfig { epochs: 20, ..final_cfg.clone() };
                let evaluator = CvEvaluator::new(&net, &target, sel_cfg, 5);
                let opts = GreedyOptions { k_max: Some(4), ..GreedyOptions::default() };
                let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
                let mut gs = net.clone();
                gs.attach_head(gs.head_kind(), classes, 900 + seed).unwrap();
                gs.set_trainable(&trace.final_subset).unwrap();
                train(&mut gs, &target, &final_cfg).unwrap();
                let gs_acc = evaluate(&gs, &test).unwrap().accuracy;

                println!(
                    "seed {seed}: lp {:.4} ft {:.4} greedy {:.4} subset [{}] ({} evals) in {:?}",
                    lp_acc, ft_acc, gs_acc, trace.final_subset.render(),
                    trace.candidate_evaluations(), t.elapsed()
                );
                summary.push((lp_acc, ft_acc, gs_acc, trace.final_subset.render()));
            }
            let mean = |f: &dyn Fn(&(f64, f64, f64, String)) -> f64| {
                summary.iter().map(f).sum::<f64>() / summary.len() as f64
            };
            println!(
                "MEANS: lp {:.4} ft {:.4} greedy {:.4}",
                mean(&|r| r.0), mean(&|r| r.1), mean(&|r| r.2)
            );
        }
        _ => eprintln!("unknown mode {mode}"),
    }
}
