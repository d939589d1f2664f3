use hanm_core::data::{default_two_class_specs, gen_mechanism_mixture, standardize, split_indices, MechanismFamily};
use hanm_core::mcvae::{train, MixtureCvaeConfig};
use hanm_core::nn::Matrix;

fn test_elbo(cfg: &MixtureCvaeConfig, cause: &[f64], effect: &[f64]) -> (f64, f64, f64, f64) {
    let (tr, te) = split_indices(cause.len(), 0.8, 42).unwrap();
    let ct: Vec<f64> = tr.iter().map(|&i| cause[i]).collect();
    let et: Vec<f64> = tr.iter().map(|&i| effect[i]).collect();
    let cv: Vec<f64> = te.iter().map(|&i| cause[i]).collect();
    let ev: Vec<f64> = te.iter().map(|&i| effect[i]).collect();
    let (model, trace) = train(cfg, &ct, &et).unwrap();
    let terms = model
        .mean_elbo(&Matrix::column(&cv).unwrap(), &Matrix::column(&ev).unwrap(), 16, 7)
        .unwrap();
    (terms.elbo, terms.recon, terms.kl_gauss + terms.kl_cat, *trace.last().unwrap())
}

#[test]
#[ignore]
fn probe_fit() {
    let ds = gen_mechanism_mixture(&default_two_class_specs(MechanismFamily::F1), 100).unwrap();
    let (s, _) = standardize(&ds).unwrap();
    for (epochs, lr) in [(600usize, 1e-3), (2000, 1e-3), (600, 5e-3), (2000, 5e-3), (4000, 5e-3)] {
        let cfg = MixtureCvaeConfig { k: 2, epochs, learning_rate: lr, seed: 11, ..Default::default() };
        let t0 = std::time::Instant::now();
        let (ef, rf, klf, lf) = test_elbo(&cfg, &s.x, &s.y);
        let (eb, rb, klb, lb) = test_elbo(&cfg, &s.y, &s.x);
        println!(
            "epochs={epochs} lr={lr}: fwd elbo={ef:.3} (recon {rf:.3} kl {klf:.3} trainloss {lf:.3}) | bwd elbo={eb:.3} (recon {rb:.3} kl {klb:.3} trainloss {lb:.3}) | fwd-bwd={:.3} ({:.1}s)",
            ef - eb, t0.elapsed().as_secs_f64()
        );
    }
}
