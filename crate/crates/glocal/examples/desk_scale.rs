//! Desk-scale dry run: train the toy setup on synthetic blobs and print
//! the held-out metrics plus wall time.

use std::time::Instant;

use glocal::backbone::Backbone;
use glocal::config::RunConfig;
use glocal::data::synth_blobs;
use glocal::train::{evaluate, train};

fn main() {
    let backbone = Backbone::toy();
    let cfg = RunConfig::toy();
    let train_index = synth_blobs(64, 64, cfg.image_resolution, 0);
    let eval_index = synth_blobs(64, 64, cfg.image_resolution, 1);

    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = train(&cfg, &backbone, &train_index, dir.path()).unwrap();
    let t_train = t0.elapsed();

    let first = &out.history.epochs[0];
    let last = out.history.epochs.last().unwrap();
    println!("loss epoch 1:  total {:.4} global {:.4} local {:.4} gcl {:.4}",
        first.total, first.global, first.local_total(), first.gcl);
    println!("loss epoch {}: total {:.4} global {:.4} local {:.4} gcl {:.4}",
        out.history.epochs.len(), last.total, last.global, last.local_total(), last.gcl);

    let t1 = Instant::now();
    let (report, _) = evaluate(&cfg, &backbone, &out.bank, &eval_index).unwrap();
    let t_eval = t1.elapsed();

    println!("train {:?}  eval {:?}", t_train, t_eval);
    println!("image AUROC {:?}", report.mean_image_auroc);
    println!("image AP    {:?}", report.mean_image_ap);
    println!("pixel AUROC {:?}", report.mean_pixel_auroc);
    println!("pixel AUPRO {:?}", report.mean_pixel_aupro);
}
