use qdk::quantizer::{quantize_network, Method, PipelineEvent, QuantizePolicy};
use qdk::zoo::{build_toy_mde, calibration_images, ToyMdeConfig};
use std::time::Instant;

fn main() {
    let cfg = ToyMdeConfig::default();
    let net = build_toy_mde(&cfg).unwrap();
    let calib = calibration_images(cfg.seed, 32, cfg.input_size);
    let mut policy = QuantizePolicy::new(Method::QuartDepth);
    policy.act_bits = Some(4);
    let t0 = Instant::now();
    let mut last = Instant::now();
    quantize_network(&net, &calib, &policy, |e| {
        if let PipelineEvent::LayerFinished { layer, .. } = e {
            println!("{layer}: {:.2}s (total {:.1}s)", last.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64());
            last = Instant::now();
        }
    })
    .unwrap();
}
