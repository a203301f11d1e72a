use gdsr::data::{load_dataset, Normalizer};
use gdsr::model::{load_checkpoint, GuidedDsr, ModelConfig};
use gdsr::rng::Rng;
use gdsr::train::{extract_gradient_gt, gradient_loss, masked_mean_abs};
use gdsr::tensor::no_grad;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut model = GuidedDsr::<f32>::new(ModelConfig::tiny(), &mut Rng::new(0)).unwrap();
    load_checkpoint(&mut model, std::path::Path::new(&args[1])).unwrap();
    let samples = load_dataset(std::path::Path::new(&args[2]), 4).unwrap();
    let norm = Normalizer::new(400.0).unwrap();
    let unit = norm.normalize(&samples[0].1);
    let out = no_grad(|| model.forward(&unit.d_lr, &unit.i_hr)).unwrap();
    let m_final = masked_mean_abs(&out.d_sr, &unit.d_gt, &unit.mask).unwrap().item();
    let m_s1 = masked_mean_abs(out.d_sr_s1(), &unit.d_gt, &unit.mask).unwrap().item();
    let m_s2 = masked_mean_abs(out.d_sr_s2(), &unit.d_gt, &unit.mask).unwrap().item();
    let e_gt = extract_gradient_gt(&unit.d_gt);
    let l_g = gradient_loss(&out.e_pred, &e_gt).unwrap().item();
    println!("m(final) = {m_final:.5}");
    println!("m(stage1) = {m_s1:.5}  (x0.2 = {:.5})", 0.2 * m_s1);
    println!("m(stage2) = {m_s2:.5}  (x0.2 = {:.5})", 0.2 * m_s2);
    println!("L_g = {l_g:.5}  (x0.01 = {:.5})", 0.01 * l_g);
    let total = m_final as f64 + 0.2 * (m_s1 as f64 + m_s2 as f64) + 0.01 * l_g as f64;
    println!("L_total = {total:.5}  ratio vs 0.05534 = {:.3}", total / 0.05534);
}
