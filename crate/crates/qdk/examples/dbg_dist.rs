use qdk::zoo::{build_toy_mde, calibration_images, ToyMdeConfig};

fn main() {
    let cfg = ToyMdeConfig::default();
    let net = build_toy_mde(&cfg).unwrap();
    let imgs = calibration_images(cfg.seed, 8, cfg.input_size);
    for lname in ["dec2", "dec3"] {
        let idx = net.layers.iter().position(|l| l.name == lname).unwrap();
        let mut per_ch: Vec<Vec<f64>> = vec![];
        for x in &imgs {
            let tr = net.forward_trace(x).unwrap();
            let act = &tr[idx].input;
            let (_, c, _) = act.axis_split(1).unwrap();
            if per_ch.is_empty() { per_ch = vec![vec![]; c]; }
            for ch in 0..c {
                per_ch[ch].extend(act.channel_values(1, ch).unwrap());
            }
        }
        println!("== input of {lname} ==");
        for (c, vals) in per_ch.iter().enumerate().take(8) {
            let mut s = vals.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = s.len();
            let max = s[n-1];
            let p95 = s[(0.95 * (n-1) as f64) as usize];
            let med = s[n/2].abs();
            let std = {
                let m = vals.iter().sum::<f64>() / n as f64;
                (vals.iter().map(|v| (v-m)*(v-m)).sum::<f64>() / n as f64).sqrt()
            };
            println!("ch {c}: std {std:.3} p95 {p95:.3} max {max:.2} med|x| {med:.3}");
        }
    }
}
