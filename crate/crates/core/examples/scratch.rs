use crft_core::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let n_data: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4096);
    let epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(40);
    let clip: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let t0 = Instant::now();
    let samples = gen_chain_arith(n_data + 800, n_steps, 10, 1).unwrap();
    let (train, rest) = samples.split_at(n_data);
    let (val, test) = rest.split_at(400);
    println!("task {n_steps}-step: {} train", train.len());

    let mut model = MicroTransformer::new(ModelConfig::desk(tasks::vocab::SIZE), 7).unwrap();
    let pcfg = PretrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        warmup_ratio: 0.02,
        weight_decay: 0.01,
        seed: 42,
        target_band: Some((0.40, 0.60)),
        check_every: 50,
        max_grad_norm: if clip > 0.0 { Some(clip) } else { None },
    };
    let out = pretrain_base(&mut model, train, &val[..160], &pcfg).unwrap();
    print!("acc: ");
    for e in &out.history.epochs {
        if let Some(acc) = e.val_accuracy {
            print!("{acc:.2} ");
        }
    }
    println!();
    print!("loss/grad: ");
    for s in out.history.steps.iter().step_by(100) {
        print!("[{} {:.3} g{:.1}] ", s.step, s.loss, s.grad_norm);
    }
    println!();
    println!(
        "pretrain: acc {:.3} steps {} in_band {} elapsed {:?}",
        out.val_accuracy,
        out.steps,
        out.stopped_in_band,
        t0.elapsed()
    );

    let base_acc = evaluate(&model, &test[..256], None).unwrap().accuracy;
    println!("baseline test acc {:.3}", base_acc);

    let crft_cfg = CrftConfig::default();
    let tcfg = TrainConfig::default();
    let t1 = Instant::now();
    let n_crft: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let (params, hist) = train_crft(&model, &train[..n_crft], &crft_cfg, &tcfg, None).unwrap();
    let losses: Vec<f64> = hist.steps.iter().map(|s| s.loss).collect();
    println!(
        "crft: first loss {:.3}, last loss {:.3}, {} steps, {:?}",
        losses.first().unwrap(),
        losses.last().unwrap(),
        losses.len(),
        t1.elapsed()
    );
    print!("crft loss/grad: ");
    for s in hist.steps.iter().step_by(20) {
        print!("[{} {:.3} g{:.3}] ", s.step, s.loss, s.grad_norm);
    }
    println!();
    for (k, e) in params.edits.iter() {
        let wn: f64 = e.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn: f64 = e.b.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("edit {:?}: |W|={:.4} |b|={:.4}", k, wn, bn);
    }
    let crft_acc = evaluate(&model, &test[..256], Some((&params, &crft_cfg)))
        .unwrap()
        .accuracy;
    println!(
        "crft test acc {:.3} (gain {:+.1} pts), total {:?}",
        crft_acc,
        (crft_acc - base_acc) * 100.0,
        t0.elapsed()
    );
}
