// scratch: inspect the smoothness failure mode on one seed
use ptd_core::config::PipelineConfig;
use ptd_core::data::Split;
use ptd_core::losses::smoothness_report;
use ptd_core::prune::iterative_prune_lr_rewind;
use ptd_core::threads::Parallelism;
use ptd_core::train::{evaluate, train, Init};
use std::path::PathBuf;

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let dir = PathBuf::from("configs");
    let cfg = PipelineConfig::load(&dir.join("desk_blobs.json")).unwrap();
    let arch = cfg.arch.resolve(&dir).unwrap();
    let par = Parallelism::resolve(false);
    let data = cfg.data.load(&dir, seed).unwrap();
    let mut tcfg = cfg.train.clone().unwrap();
    tcfg.seed = seed;
    let (teacher, rep) = train::<f32>(&arch, &data, &tcfg, Init::Fresh, &par).unwrap();
    println!("teacher best epoch {} val {:?}", teacher.epoch, rep.best_val_acc());
    for r in &rep.epochs {
        println!("  ep {}: train_loss {:.4} train_acc {:.4} val {:.4} lr {}", r.epoch, r.train_loss, r.train_acc, r.val_acc, r.lr);
    }
    let (pruned, _) = iterative_prune_lr_rewind(teacher.clone(), &cfg.prune.clone().unwrap(), &data, &par).unwrap();
    let t_train = evaluate(&teacher, &data, Split::Train, 256, &par).unwrap();
    let p_train = evaluate(&pruned, &data, Split::Train, 256, &par).unwrap();
    println!("teacher train acc {t_train:.4}; pruned train acc {p_train:.4}");
    let s = smoothness_report(&teacher, &pruned, &data, Split::Train, 256, &par).unwrap();
    println!("smoothness mean {:.5}", s.mean_log_ratio);
    // confidence summaries
    let mean_a: f64 = s.per_sample.iter().map(|x| x.prob_a).sum::<f64>() / s.per_sample.len() as f64;
    let mean_b: f64 = s.per_sample.iter().map(|x| x.prob_b).sum::<f64>() / s.per_sample.len() as f64;
    let min_a = s.per_sample.iter().map(|x| x.prob_a).fold(1.0f64, f64::min);
    let min_b = s.per_sample.iter().map(|x| x.prob_b).fold(1.0f64, f64::min);
    println!("mean true-label prob: dense {mean_a:.4} pruned {mean_b:.4}; min dense {min_a:.2e} pruned {min_b:.2e}");
    let mut worst: Vec<&ptd_core::losses::SmoothnessSample> = s.per_sample.iter().collect();
    worst.sort_by(|a, b| a.log_ratio.partial_cmp(&b.log_ratio).unwrap());
    for w in worst.iter().take(5) {
        println!("  worst sample {}: label {} prob_a {:.3e} prob_b {:.3e} lr {:.3}", w.index, w.true_label, w.prob_a, w.prob_b, w.log_ratio);
    }
}
