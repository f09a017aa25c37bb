use qdk::metrics::{evaluate, mean_record, DepthPair};
use qdk::quantizer::{quantize_network, Method, QuantizePolicy};
use qdk::zoo::{build_toy_mde, calibration_images, evaluation_images, ToyMdeConfig};

fn absrel(net: &qdk::network::ToyNetwork, float: &qdk::network::ToyNetwork, eval: &[qdk::Tensor]) -> f64 {
    let recs: Vec<_> = eval.iter().map(|x| {
        let gt = float.forward(x).unwrap();
        let pred = net.forward(x).unwrap();
        let mask: Vec<bool> = gt.data().iter().map(|&g| g >= 0.05).collect();
        evaluate(&DepthPair::new(pred, gt).unwrap().with_mask(mask).unwrap()).unwrap()
    }).collect();
    mean_record(&recs).unwrap().absrel
}

fn main() {
    for gain in [1000.0, 2500.0, 6000.0] {
        let cfg = ToyMdeConfig { outlier_gain: gain, ..Default::default() };
        let net = build_toy_mde(&cfg).unwrap();
        let calib = calibration_images(cfg.seed, 32, cfg.input_size);
        let eval = evaluation_images(cfg.seed, 8, cfg.input_size);
        let mut out = vec![format!("gain {gain}:")];
        for (label, method, bits) in [
            ("q8", Method::QuartDepth, 8u8), ("q4", Method::QuartDepth, 4),
            ("m8", Method::Minmax, 8), ("m4", Method::Minmax, 4),
        ] {
            let mut policy = QuantizePolicy::new(method);
            policy.act_bits = Some(bits);
            policy.reconstruction.iterations = 800;
            let q = quantize_network(&net, &calib, &policy, |_| {}).unwrap();
            out.push(format!("{label} {:.4}", absrel(&q, &net, &eval)));
        }
        println!("{}", out.join("  "));
    }
}
