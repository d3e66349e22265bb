// Scratch probe: J ceiling of mask quantization through the feature grid.
use hvc::config::SynthSection;
use hvc::metrics::jaccard;
use hvc::propagation::{argmax_classes, downsample_mask, upsample_soft};
use hvc::synth;

fn main() {
    let cfg = SynthSection::default();
    let videos = synth::generate_eval_videos(&cfg, 1);
    let grid = 8;
    let mut all_j = Vec::new();
    for video in &videos {
        let classes = video
            .iter()
            .flat_map(|(_, m)| m.iter().copied())
            .max()
            .unwrap() as usize
            + 1;
        for (_, mask) in video {
            let soft = downsample_mask(mask, classes, grid, grid);
            let up = upsample_soft(&soft, 64, 64);
            let hard = argmax_classes(&up);
            for c in 1..classes as u8 {
                let p = hard.mapv(|v| v == c);
                let g = mask.mapv(|v| v == c);
                if g.iter().any(|&v| v) {
                    all_j.push(jaccard(&p, &g).unwrap());
                }
            }
        }
    }
    let mean: f64 = all_j.iter().sum::<f64>() / all_j.len() as f64;
    let min = all_j.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("quantization ceiling: mean J = {mean:.4}, min J = {min:.4}, n = {}", all_j.len());
}
