//! Train the toy model and print the headline grounding numbers:
//! unpruned accuracy, then accuracy at 50% cls-visual pruning under
//! shifted vs gap realignment, plus the two full-sequence misalignment
//! probes (permuted order, shifted values).

use prunebench_core::bench::data::generate_dataset;
use prunebench_core::bench::eval::{evaluate, evaluate_shift_full, EvalOptions};
use prunebench_core::bench::train::{train_model, TrainConfig};
use prunebench_core::math::Rng;
use prunebench_core::model::ModelConfig;
use prunebench_core::prune::{Alignment, Strategy};

fn main() {
    let cfg = ModelConfig::default();
    let tc = TrainConfig::default();
    let mut rng = Rng::new(0);
    let train = generate_dataset(2048, &cfg, &mut rng).unwrap();
    let val = generate_dataset(512, &cfg, &mut rng).unwrap();

    let t0 = std::time::Instant::now();
    let (w, summary) = train_model(&train, &val, &cfg, &tc).unwrap();
    println!(
        "trained {} epochs in {:.1}s  loss {:.4} -> {:.4}  train acc {:.3}  val acc {:.3}",
        tc.epochs,
        t0.elapsed().as_secs_f64(),
        summary.epoch_losses.first().unwrap(),
        summary.epoch_losses.last().unwrap(),
        summary.final_train_accuracy,
        summary.final_val_accuracy,
    );

    let opts = EvalOptions::default();
    let base = evaluate(&w, &cfg, &val, Strategy::None, 1.0, Alignment::Gap, &opts).unwrap();
    println!("unpruned accuracy          {base:.3}");
    for (label, strategy, ratio, alignment) in [
        ("cls_visual 0.5 shifted  ", Strategy::ClsVisual, 0.5, Alignment::Shifted),
        ("cls_visual 0.5 gap      ", Strategy::ClsVisual, 0.5, Alignment::Gap),
        ("cls_visual 1.0 permuted ", Strategy::ClsVisual, 1.0, Alignment::Permuted),
        ("random     0.5 shifted  ", Strategy::Random, 0.5, Alignment::Shifted),
        ("random     0.5 gap      ", Strategy::Random, 0.5, Alignment::Gap),
    ] {
        let acc = evaluate(&w, &cfg, &val, strategy, ratio, alignment, &opts).unwrap();
        println!("{label}   {acc:.3}");
    }
    let shift_full = evaluate_shift_full(&w, &cfg, &val, 4, &opts).unwrap();
    println!("full seq, visual ids +4     {shift_full:.3}");
}
