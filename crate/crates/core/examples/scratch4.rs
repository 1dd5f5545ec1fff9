use crft_core::checkpoint;
use crft_core::tasks::{gen_dialect_mix, gen_dialect_task};
use crft_core::*;
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(9e-4);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12);
    let n_crft: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1024);

    let t0 = Instant::now();
    let task = gen_dialect_task(2600, 0, n_steps, 10, 555).unwrap();
    let (task_train, rest) = task.split_at(1536);
    let (task_val, task_test) = rest.split_at(256);

    let ckpt_path = format!("/tmp/twophase_{n_steps}.ckpt");
    let model = if Path::new(&ckpt_path).exists() {
        checkpoint::load_model(Path::new(&ckpt_path)).unwrap()
    } else {
        // Phase 1: pure plain dialect until the arithmetic skill forms.
        let plain = gen_dialect_mix(6144, 0, 1, n_steps, 10, 1).unwrap();
        let plain_val = gen_dialect_mix(256, 0, 1, n_steps, 10, 91).unwrap();
        let mut model = MicroTransformer::new(ModelConfig::desk(tasks::vocab::SIZE), 7).unwrap();
        let p1 = PretrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_ratio: 0.02,
            weight_decay: 0.01,
            seed: 42,
            target_band: Some((0.72, 1.01)),
            check_every: 50,
            max_grad_norm: None,
        };
        let out1 = pretrain_base(&mut model, &plain, &plain_val, &p1).unwrap();
        println!(
            "phase1: {} steps, plain val {:.3}, in_band {}, {:?}",
            out1.steps,
            out1.val_accuracy,
            out1.stopped_in_band,
            t0.elapsed()
        );

        // Phase 2: brief 1:1 dialect mixture, stop inside the band on the
        // shifted task.
        let mix = gen_dialect_mix(2048, 1, 2, n_steps, 10, 2).unwrap();
        let p2 = PretrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 5e-4,
            warmup_ratio: 0.0,
            weight_decay: 0.0,
            seed: 43,
            target_band: Some((0.40, 0.60)),
            check_every: 10,
            max_grad_norm: None,
        };
        let t2 = Instant::now();
        let out2 = pretrain_base(&mut model, &mix, task_val, &p2).unwrap();
        print!("phase2 trace: ");
        for e in out2.history.epochs.iter() {
            if let Some(a) = e.val_accuracy {
                print!("{a:.2} ");
            }
        }
        println!();
        println!(
            "phase2: {} steps, dialect val {:.3}, in_band {} ({:?})",
            out2.steps,
            out2.val_accuracy,
            out2.stopped_in_band,
            t2.elapsed()
        );
        checkpoint::save_model(&model, Path::new(&ckpt_path)).unwrap();
        model
    };

    let base_task = evaluate(&model, task_test, None).unwrap().accuracy;
    let plain_ref = gen_dialect_mix(300, 0, 1, n_steps, 10, 777).unwrap();
    let base_plain = evaluate(&model, &plain_ref, None).unwrap().accuracy;
    println!("base: shifted-task acc {base_task:.3}, plain acc {base_plain:.3} ({:?})", t0.elapsed());

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
        "crft lr={lr} epochs={epochs} n={n_crft}: loss {:.4}->{:.4} ({} steps), task acc {:.3} ({:+.1} pts) [{:?}]",
        losses[0],
        losses.last().unwrap(),
        losses.len(),
        acc,
        (acc - base_task) * 100.0,
        t1.elapsed()
    );
}
