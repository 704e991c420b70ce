// Temporary tuning harness (not part of the deliverable).
use std::time::Instant;

use tcbct::correction::{run_pipeline, PipelineConfig, PriorKind};
use tcbct::io::config::ConfigDoc;
use tcbct::metrics::{mae, rmse, Roi};
use tcbct::phantom::Phantom;
use tcbct::projector::{back_project, forward_project, simulate_projections, Volume};
use tcbct::io::config::{geometry_from_doc};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("proj");

    let doc = ConfigDoc::from_file(std::path::Path::new("configs/desk_geometry.cfg")).unwrap();
    let geom = geometry_from_doc(&doc).unwrap();
    let pdoc = ConfigDoc::from_file(std::path::Path::new("configs/desk_pipeline.cfg")).unwrap();
    let mut cfg = PipelineConfig::from_doc(&pdoc).unwrap().validated().unwrap();
    let head = Phantom::from_file(std::path::Path::new("configs/desk_head.phantom")).unwrap();

    match mode {
        "proj" => {
            println!("fov_radius = {:.2}", geom.fov_radius());
            let t = Instant::now();
            let truth = head.voxelize(&cfg.fine_grid, 2);
            println!("voxelize fine x2: {:.2?}", t.elapsed());
            let t = Instant::now();
            let p = forward_project(&truth, &geom);
            println!("forward fine: {:.2?} (max {:.3})", t.elapsed(), p.data.iter().cloned().fold(0.0f64, f64::max));
            let t = Instant::now();
            let _b = back_project(&p, &cfg.fine_grid);
            println!("backproject fine: {:.2?}", t.elapsed());
            let ones = Volume::ones(cfg.coarse_grid.clone());
            let t = Instant::now();
            let pc = forward_project(&ones, &geom);
            println!("forward coarse: {:.2?}", t.elapsed());
            let t = Instant::now();
            let _bc = back_project(&pc, &cfg.coarse_grid);
            println!("backproject coarse: {:.2?}", t.elapsed());
            let t = Instant::now();
            let sim = simulate_projections(&head, &geom, 0.0, 7);
            println!("simulate desk head: {:.2?} (max {:.3})", t.elapsed(), sim.data.iter().cloned().fold(0.0f64, f64::max));
            // truncation evidence: boundary columns nonzero
            let mut edge_max = 0.0f64;
            for a in 0..geom.n_angles {
                for r in 0..geom.det_rows {
                    edge_max = edge_max.max(sim.at(a, r, 0)).max(sim.at(a, r, geom.det_cols - 1));
                }
            }
            println!("edge max = {edge_max:.3}");
        }
        "train" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
            cfg.inr_train.steps = steps;
            if let Some(l) = args.get(3).and_then(|s| s.parse().ok()) {
                cfg.inr_levels = l;
            }
            if let Some(t) = args.get(4).and_then(|s| s.parse().ok()) {
                cfg.inr_table_size = t;
            }
            if let Some(w) = args.get(5).and_then(|s| s.parse().ok()) {
                cfg.inr_mlp.width = w;
            }
            if let Some(g) = args.get(6).and_then(|s| s.parse().ok()) {
                cfg.inr_growth = g;
            }
            println!(
                "L={} T={} width={} growth={}",
                cfg.inr_levels, cfg.inr_table_size, cfg.inr_mlp.width, cfg.inr_growth
            );
            let sim = simulate_projections(&head, &geom, 0.0, 7);
            let model = tcbct::inr::InrModel::init(cfg.hash_grid_config(), cfg.inr_mlp.clone(), cfg.model_seed).unwrap();
            let t = Instant::now();
            let out = tcbct::inr::train(model, &sim, &geom, &cfg.inr_train).unwrap();
            let dt = t.elapsed();
            println!("train {} steps: {:.2?} ({:.1} ms/step)", steps, dt, dt.as_secs_f64() * 1e3 / steps as f64);
            let first = out.loss_trace.first().unwrap();
            let last10: f64 = out.loss_trace.iter().rev().take(10).sum::<f64>() / 10.0;
            println!("loss first = {first:.4}, mean last10 = {last10:.4}, ratio = {:.3}", last10 / first);
            let t = Instant::now();
            let prior = out.model.render_volume(&cfg.coarse_grid);
            println!("render coarse: {:.2?}", t.elapsed());
            let truth_c = head.voxelize(&cfg.coarse_grid, 2);
            let zero = Volume::zeros(cfg.coarse_grid.clone());
            let r_model = rmse(&prior, &truth_c, &Roi::All).unwrap();
            let r_zero = rmse(&zero, &truth_c, &Roi::All).unwrap();
            println!("coarse rmse ALL: model {r_model:.5} vs zero-baseline {r_zero:.5} (ratio {:.3})", r_model / r_zero);
            let seen = Roi::Cylinder { center: [0.0, 0.0], radius: 190.0, z_min: -40.0, z_max: 40.0 };
            let r_model_s = rmse(&prior, &truth_c, &seen).unwrap();
            let r_zero_s = rmse(&zero, &truth_c, &seen).unwrap();
            println!("coarse rmse SEEN: model {r_model_s:.5} vs zero {r_zero_s:.5} (ratio {:.3})", r_model_s / r_zero_s);
            for (name, roi) in [
                ("fov r<56 z<25", Roi::Cylinder { center: [0.0, 0.0], radius: 56.0, z_min: -25.0, z_max: 25.0 }),
                ("ring 56-120 z<35", Roi::Cylinder { center: [0.0, 0.0], radius: 120.0, z_min: -35.0, z_max: 35.0 }),
                ("ring 120-190", Roi::Cylinder { center: [0.0, 0.0], radius: 190.0, z_min: -35.0, z_max: 35.0 }),
            ] {
                let rm = rmse(&prior, &truth_c, &roi).unwrap();
                let rz = rmse(&zero, &truth_c, &roi).unwrap();
                println!("  {name}: model {rm:.5} zero {rz:.5} ratio {:.3}", rm / rz);
            }
            let mid_z = cfg.coarse_grid.dims()[2] / 2;
            std::fs::create_dir_all("target/tune").unwrap();
            tcbct::io::export_slice(&prior, tcbct::io::Axis::Axial, mid_z, 0.018, 0.045, std::path::Path::new("target/tune/prior_ax.pgm")).unwrap();
            tcbct::io::export_slice(&truth_c, tcbct::io::Axis::Axial, mid_z, 0.018, 0.045, std::path::Path::new("target/tune/truth_ax.pgm")).unwrap();
            let mid_x = cfg.coarse_grid.dims()[0] / 2;
            tcbct::io::export_slice(&prior, tcbct::io::Axis::Sagittal, mid_x, 0.018, 0.045, std::path::Path::new("target/tune/prior_sag.pgm")).unwrap();
            tcbct::io::export_slice(&truth_c, tcbct::io::Axis::Sagittal, mid_x, 0.018, 0.045, std::path::Path::new("target/tune/truth_sag.pgm")).unwrap();
            // error concentrated where?
            let mut err_seen = 0.0; let mut n_seen = 0usize; let mut err_unseen = 0.0; let mut n_unseen = 0usize;
            let [nx, ny, nz] = cfg.coarse_grid.dims();
            for k in 0..nz { for j in 0..ny { for i in 0..nx {
                let c = cfg.coarse_grid.voxel_center(i, j, k);
                let idx = (k * ny + j) * nx + i;
                let e = (prior.values[idx] - truth_c.values[idx]).powi(2);
                if seen.contains(c) { err_seen += e; n_seen += 1; } else { err_unseen += e; n_unseen += 1; }
            }}}
            println!("seen: n {} rms {:.5} | unseen: n {} rms {:.5}", n_seen, (err_seen / n_seen as f64).sqrt(), n_unseen, (err_unseen / n_unseen as f64).sqrt());
        }
        "pipe" => {
            let which = args.get(2).map(|s| s.as_str()).unwrap_or("none");
            let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(cfg.sqs_fine.n_iters);
            let lambda: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(cfg.sqs_fine.lambda);
            cfg.sqs_fine.n_iters = iters;
            cfg.sqs_fine.lambda = lambda;
            cfg.prior_kind = which.parse().unwrap();
            let sim = simulate_projections(&head, &geom, 0.0, 7);
            let t = Instant::now();
            let (vol, report) = run_pipeline(&sim, &cfg).unwrap();
            println!("pipeline {which}: {:.2?} timings {:?}", t.elapsed(), report.timings);
            let truth = head.voxelize(&cfg.fine_grid, 2);
            let roi = Roi::interior(&cfg.fine_grid, 0.8);
            let m = mae(&vol, &truth, &roi).unwrap();
            let r = rmse(&vol, &truth, &roi).unwrap();
            println!("interior MAE = {m:.6}  RMSE = {r:.6}");
            let tr = &report.fine_objective_trace;
            println!("fine objective: first {:.4} last {:.4}", tr.first().unwrap().total, tr.last().unwrap().total);
        }
        "untrunc" => {
            let small = Phantom::from_file(std::path::Path::new("configs/desk_small.phantom")).unwrap();
            let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(cfg.sqs_fine.n_iters);
            cfg.sqs_fine.n_iters = iters;
            let sim = simulate_projections(&small, &geom, 0.0, 7);
            let truth = small.voxelize(&cfg.fine_grid, 2);
            let roi = Roi::interior(&cfg.fine_grid, 0.8);
            for which in ["none", "inr"] {
                cfg.prior_kind = which.parse().unwrap();
                let t = Instant::now();
                let (vol, _r) = run_pipeline(&sim, &cfg).unwrap();
                let m = mae(&vol, &truth, &roi).unwrap();
                println!("untrunc {which}: {:.2?} interior MAE {m:.6}", t.elapsed());
                if which == "none" {
                    // stash for comparison
                    std::fs::create_dir_all("target/tune").unwrap();
                    tcbct::io::write_volume(std::path::Path::new("target/tune/none.vol"), &vol).unwrap();
                } else {
                    let none = tcbct::io::read_volume(std::path::Path::new("target/tune/none.vol")).unwrap();
                    let rel = rmse(&vol, &none, &Roi::All).unwrap()
                        / (none.values.iter().map(|v| v * v).sum::<f64>() / none.values.len() as f64).sqrt();
                    println!("untrunc inr vs none rel RMSE = {rel:.5}");
                }
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
    let _ = PriorKind::None;
}
