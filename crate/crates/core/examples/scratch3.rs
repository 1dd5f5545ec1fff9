use crft_core::checkpoint;
use crft_core::tasks::{gen_dialect_mix, gen_dialect_task};
use crft_core::*;
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let shifted_per: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cycle: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(9e-4);
    let epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(12);
    let n_crft: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1024);

    let t0 = Instant::now();
    // Target task: shifted dialect, generated from a disjoint seed space.
    let task = gen_dialect_task(2600, 0, n_steps, 10, 555).unwrap();
    let (task_train, rest) = task.split_at(1536);
    let (task_val, task_test) = rest.split_at(256);

    let ckpt_path = format!("/tmp/dialect_{n_steps}_{shifted_per}_{cycle}.ckpt");
    let model = if Path::new(&ckpt_path).exists() {
        checkpoint::load_model(Path::new(&ckpt_path)).unwrap()
    } else {
        let corpus = gen_dialect_mix(8192, shifted_per, cycle, n_steps, 10, 1).unwrap();
        let mut model = MicroTransformer::new(ModelConfig::desk(tasks::vocab::SIZE), 7).unwrap();
        let pcfg = PretrainConfig {
            epochs: 24,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_ratio: 0.02,
            weight_decay: 0.01,
            seed: 42,
            target_band: Some((0.40, 0.60)),
            check_every: 50,
            max_grad_norm: None,
        };
        let out = pretrain_base(&mut model, &corpus, task_val, &pcfg).unwrap();
        print!("band trace: ");
        for e in out.history.epochs.iter() {
            if let Some(a) = e.val_accuracy {
                print!("{a:.2} ");
            }
        }
        println!();
        println!(
            "pretrained {} steps, dialect val {:.3}, in_band {}, {:?}",
            out.steps,
            out.val_accuracy,
            out.stopped_in_band,
            t0.elapsed()
        );
        checkpoint::save_model(&model, Path::new(&ckpt_path)).unwrap();
        model
    };

    let base_task = evaluate(&model, task_test, None).unwrap().accuracy;
    // Also check plain-dialect skill for reference.
    let plain = gen_dialect_mix(400, 0, 1, n_steps, 10, 777).unwrap();
    let base_plain = evaluate(&model, &plain, None).unwrap().accuracy;
    println!("base: shifted-task acc {base_task:.3}, plain acc {base_plain:.3}");

    let crft = CrftConfig::default();
    let tcfg = TrainConfig {
        epochs,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let (params, hist) = train_crft(&model, &task_train[..n_crft], &crft, &tcfg, None).unwrap();
    let losses: Vec<f64> = hist.steps.iter().map(|s| s.loss).collect();
    let acc = evaluate(&model, task_test, Some((&params, &crft))).unwrap().accuracy;
    println!(
        "crft lr={lr} epochs={epochs} n={n_crft}: loss {:.4}->{:.4} ({} steps), task acc {:.3} ({:+.1} pts) [{:?} crft, {:?} total]",
        losses[0],
        losses.last().unwrap(),
        losses.len(),
        acc,
        (acc - base_task) * 100.0,
        t1.elapsed(),
        t0.elapsed()
    );
}
