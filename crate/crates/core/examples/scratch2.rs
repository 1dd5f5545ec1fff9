use crft_core::checkpoint;
use crft_core::*;
use std::path::Path;
use std::time::Instant;

/// Mixed-length pretraining corpus: short chains bootstrap the digit table,
/// the target length supplies the band signal.
fn mixed_corpus(seed: u64) -> Vec<TaskSample> {
    let a = gen_chain_arith(2048, 2, 10, seed).unwrap();
    let b = gen_chain_arith(2048, 3, 10, seed + 1).unwrap();
    let c = gen_chain_arith(1024, 4, 10, seed + 2).unwrap();
    let mut out = Vec::new();
    let (mut ia, mut ib, mut ic) = (a.into_iter(), b.into_iter(), c.into_iter());
    loop {
        let mut any = false;
        for _ in 0..2 {
            if let Some(s) = ia.next() {
                out.push(s);
                any = true;
            }
        }
        for _ in 0..2 {
            if let Some(s) = ib.next() {
                out.push(s);
                any = true;
            }
        }
        if let Some(s) = ic.next() {
            out.push(s);
            any = true;
        }
        if !any {
            break;
        }
    }
    out
}

fn get_base(tag: &str, lr: f64, batch: usize) -> (MicroTransformer, Vec<TaskSample>) {
    let target = gen_chain_arith(4096, 4, 10, 99).unwrap();
    let path = format!("/tmp/base_mix_{tag}.ckpt");
    if Path::new(&path).exists() {
        return (checkpoint::load_model(Path::new(&path)).unwrap(), target);
    }
    let corpus = mixed_corpus(1);
    let val4 = &target[3800..3960];
    let mut model = MicroTransformer::new(ModelConfig::desk(tasks::vocab::SIZE), 7).unwrap();
    let pcfg = PretrainConfig {
        epochs: 40,
        batch_size: batch,
        learning_rate: lr,
        warmup_ratio: 0.03,
        weight_decay: 0.01,
        seed: 42,
        target_band: Some((0.40, 0.60)),
        check_every: 40,
        max_grad_norm: None,
    };
    let t = Instant::now();
    let out = pretrain_base(&mut model, &corpus, val4, &pcfg).unwrap();
    print!("band trace: ");
    for e in out.history.epochs.iter() {
        if let Some(a) = e.val_accuracy {
            print!("{a:.2} ");
        }
    }
    println!();
    println!(
        "pretrained {} steps, 4-step val {:.3}, in_band {}, {:?}",
        out.steps, out.val_accuracy, out.stopped_in_band, t.elapsed()
    );
    checkpoint::save_model(&model, Path::new(&path)).unwrap();
    (model, target)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).cloned().unwrap_or_else(|| "overfit".into());
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(9e-4);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12);
    let n_train: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1024);

    let t_all = Instant::now();
    let (model, target) = get_base("a", 1e-3, 16);
    let test = &target[3000..3500];
    let base_acc = evaluate(&model, test, None).unwrap().accuracy;
    println!("base 4-step test acc {base_acc:.3} ({:?})", t_all.elapsed());

    match mode.as_str() {
        "overfit" => {
            let tcfg = TrainConfig {
                epochs,
                batch_size: 4,
                grad_accum_steps: 1,
                learning_rate: lr,
                weight_decay: 0.0,
                dropout: 0.0,
                ..TrainConfig::default()
            };
            let train_r = n_train == 1; // abuse 5th arg as train_r toggle
            let crft = CrftConfig { train_r, ..CrftConfig::default() };
            let t = Instant::now();
            let (_, hist) = train_crft(&model, &target[..16], &crft, &tcfg, None).unwrap();
            let losses: Vec<f64> = hist.steps.iter().map(|s| s.loss).collect();
            println!(
                "overfit lr={lr}: start {:.4} end {:.4} min {:.4} ({} steps, {:?})",
                losses[0],
                losses.last().unwrap(),
                losses.iter().cloned().fold(f64::INFINITY, f64::min),
                losses.len(),
                t.elapsed()
            );
        }
        "full" => {
            let tcfg = TrainConfig {
                epochs,
                learning_rate: lr,
                ..TrainConfig::default()
            };
            let crft = CrftConfig::default();
            let t = Instant::now();
            let (params, hist) = train_crft(&model, &target[..n_train], &crft, &tcfg, None).unwrap();
            let losses: Vec<f64> = hist.steps.iter().map(|s| s.loss).collect();
            let acc = evaluate(&model, test, Some((&params, &crft))).unwrap().accuracy;
            println!(
                "full lr={lr} epochs={epochs} n={n_train}: loss {:.4}->{:.4}, acc {:.3} ({:+.1} pts) ({:?})",
                losses[0],
                losses.last().unwrap(),
                acc,
                (acc - base_acc) * 100.0,
                t.elapsed()
            );
        }
        "random" => {
            let tcfg = TrainConfig {
                epochs,
                learning_rate: lr,
                ..TrainConfig::default()
            };
            let crft = CrftConfig {
                strategy: Strategy::Random,
                seed: 37,
                ..CrftConfig::default()
            };
            let (params, _) = train_crft(&model, &target[..n_train], &crft, &tcfg, None).unwrap();
            let acc = evaluate(&model, test, Some((&params, &crft))).unwrap().accuracy;
            println!("random-pos crft acc {:.3} ({:+.1} pts)", acc, (acc - base_acc) * 100.0);
        }
        "probe" => {
            // Measure whether the fresh edit is destructive at init.
            let crft = CrftConfig::default();
            let layers = crft.layers_for(model.cfg.n_layers).unwrap();
            let mut params = InterventionParams::init(64, 8, &layers, 1, false, 42).unwrap();
            let mut loss_of = |params: &InterventionParams, edited: bool| -> f64 {
                let mut total = 0.0;
                for s in &target[..16] {
                    let full = s.full_tokens();
                    let set = identify(&model, &full, &s.segments, &crft, None).unwrap();
                    let mut tape = Tape::new();
                    let edits = set.edit_map(params, false);
                    let trace = model
                        .forward(&mut tape, &full, if edited { Some(&edits) } else { None }, ForwardOpts::eval())
                        .unwrap();
                    let l = tape.cross_entropy(trace.logits_id, &s.answer_loss_pairs()).unwrap();
                    total += tape.data(l)[0];
                }
                total / 16.0
            };
            println!("base answer loss        : {:.4}", loss_of(&params, false));
            println!("fresh-edit answer loss  : {:.4}", loss_of(&params, true));
            for e in params.edits.values_mut() {
                e.w = e.r_rows.clone();
            }
            println!("identity-edit answer loss: {:.4}", loss_of(&params, true));
        }
        other => panic!("unknown mode {other}"),
    }
}
