//! IDX files in, holdout split, SGLD training and held-out error out.

use genbound::data_io::{encode_idx_images, encode_idx_labels, holdout_split, read_idx};
use genbound::dynamics::{run_sgld, Hooks, RunOptions, ScheduleSpec, TrajectorySeeds};
use genbound::models::{eval_risk, Architecture, EvalLoss, ModelSpec, Surrogate};
use genbound::numerics::{streams, RngStream};

fn main() -> genbound::Result<()> {
    let dir = std::env::temp_dir().join(format!("genbound-idx-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    // 4x4 images: class 0 bright on the left half, class 1 on the right.
    let mut rng = RngStream::root(3);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..200u8 {
        let class = i % 2;
        let img: Vec<u8> = (0..16)
            .map(|p| {
                let left = p % 4 < 2;
                let base = if left == (class == 0) { 180 } else { 40 };
                base + rng.below(60) as u8
            })
            .collect();
        images.push(img);
        labels.push(class);
    }
    let (img_path, lab_path) = (dir.join("train-images.idx3-ubyte"), dir.join("train-labels.idx1-ubyte"));
    std::fs::write(&img_path, encode_idx_images(4, 4, &images))?;
    std::fs::write(&lab_path, encode_idx_labels(&labels))?;

    let ds = read_idx(&img_path, &lab_path)?;
    println!("read {} examples, checksum {}", ds.len(), &ds.checksum()[..16]);
    let (train, eval) = holdout_split(&ds, 0.25, &mut RngStream::root(1).derive(streams::SPLIT))?;
    let model = ModelSpec::new(Architecture::SoftmaxRegression, 16, 2, Surrogate::CrossEntropy, EvalLoss::ZeroOne)?;
    let rec = run_sgld(
        &model,
        &train,
        &ScheduleSpec::constant(0.1, 1000.0),
        &RunOptions::new(300, 15),
        TrajectorySeeds::from_master(2),
        Hooks::default(),
    )?;
    let w = rec.final_weights();
    println!("train error {:.3}, held-out error {:.3}", eval_risk(&model, w, &train)?, eval_risk(&model, w, &eval)?);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
