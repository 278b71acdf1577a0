use std::time::Instant;
use vlinear::linalg::RngState;
use vlinear::train::forecast_mse;
use vlinear::verify::{check_table3_equivalence, persistence_mse, train_toy_model};

#[test]
fn probe_toy_training() {
    let start = Instant::now();
    let (ckpt, test, history) = train_toy_model(7).unwrap();
    let train_time = start.elapsed().as_secs_f64();
    let model_mse = forecast_mse(&test, &ckpt.params, &ckpt.basis, &ckpt.config, 10).unwrap();
    let pers = persistence_mse(&test);
    println!("train_time = {train_time:.1}s over {} epochs", history.len());
    println!("val mse first/last: {:.4} / {:.4}", history[0].val_mse, history.last().unwrap().val_mse);
    println!("test mse = {model_mse:.5}, persistence = {pers:.5}, ratio = {:.3}", model_mse / pers);
    println!("trained noise std = {:.4}", ckpt.params.wfm.noise_std());
    for k in [5usize, 10, 20] {
        let m = forecast_mse(&test, &ckpt.params, &ckpt.basis, &ckpt.config, k).unwrap();
        println!("K={k}: test mse {m:.6}");
    }
    let t3 = check_table3_equivalence(&ckpt, &test, 10, &mut RngState::new(99)).unwrap();
    println!("{t3}");
}
