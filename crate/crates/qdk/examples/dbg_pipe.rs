use qdk::metrics::{evaluate, mean_record, DepthPair};
use qdk::quantizer::{quantize_network, Method, QuantizePolicy};
use qdk::zoo::{build_toy_mde, calibration_images, evaluation_images, ToyMdeConfig};

fn absrel(net: &qdk::network::ToyNetwork, float: &qdk::network::ToyNetwork, eval: &[qdk::Tensor]) -> f64 {
    let recs: Vec<_> = eval
        .iter()
        .map(|x| {
            let gt = float.forward(x).unwrap();
            let pred = net.forward(x).unwrap();
            let mask: Vec<bool> = gt.data().iter().map(|&g| g >= 0.05).collect();
            evaluate(&DepthPair::new(pred, gt).unwrap().with_mask(mask).unwrap()).unwrap()
        })
        .collect();
    mean_record(&recs).unwrap().absrel
}

fn main() {
    let t0 = std::time::Instant::now();
    let cfg = ToyMdeConfig::default();
    let net = build_toy_mde(&cfg).unwrap();
    let calib = calibration_images(cfg.seed, 32, cfg.input_size);
    let eval = evaluation_images(cfg.seed, 8, cfg.input_size);

    let mut results = Vec::new();
    for (label, method, act_bits) in [
        ("W4    quartdepth", Method::QuartDepth, None),
        ("W4A8  quartdepth", Method::QuartDepth, Some(8u8)),
        ("W4A4  quartdepth", Method::QuartDepth, Some(4)),
        ("W4A8  minmax", Method::Minmax, Some(8)),
        ("W4A4  minmax", Method::Minmax, Some(4)),
    ] {
        let mut policy = QuantizePolicy::new(method);
        policy.act_bits = act_bits;
        let q = quantize_network(&net, &calib, &policy, |_| {}).unwrap();
        let a = absrel(&q, &net, &eval);
        println!("{label}: absrel {a:.6}  ({:.1}s)", t0.elapsed().as_secs_f64());
        results.push((label, a));
    }
    println!("\nW4 < W4A8 < W4A4: {} {} ", results[0].1 < results[1].1, results[1].1 < results[2].1);
    println!("W4A8 margin: {:.2}x", results[3].1 / results[1].1);
    println!("W4A4 margin: {:.2}x", results[4].1 / results[2].1);
}
