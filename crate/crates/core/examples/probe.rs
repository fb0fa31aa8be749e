use pips_core::geom3::icosahedral_group;
use pips_core::synth::{make_dataset, DatasetConfig};
use pips_core::train::{
    eval_student, export_pseudo_gt, pips_points, train_pips, train_teacher, EvalQueries,
    PipsConfig, PseudoGtConfig, TeacherConfig, TrainError,
};
use pips_core::voxel::VoxelGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let omega: f64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let h: usize = std::env::args().nth(2).unwrap().parse().unwrap();
    let group = icosahedral_group();
    let ds = make_dataset(&DatasetConfig::default()).unwrap();
    let tcfg = TeacherConfig::default();
    let (teacher, _) = train_teacher(&ds.train, &tcfg, &group).unwrap();
    let n_gt = ds.train.len().div_ceil(5);
    let subset: Vec<_> = (0..n_gt)
        .map(|i| ds.train[i * ds.train.len() / n_gt].clone())
        .collect();
    let gcfg = PseudoGtConfig { omega, h, ..PseudoGtConfig::default() };
    let records = export_pseudo_gt(&teacher, &subset, &gcfg, &group).unwrap();
    let pos: usize = records.iter().map(|r| r.grid.values.iter().filter(|&&v| v).count()).sum();
    eprintln!("omega {omega} h {h}: {pos} positive voxels ({:.1}/cloud)", pos as f64 / 100.0);
    let pcfg = PipsConfig { grid_h: h, ..PipsConfig::default() };
    let (nets, _) = train_pips(&subset, &records, &pcfg, &group).unwrap();
    // Coverage on the clean test split: classifier positives and selected
    // stable points per cloud.
    let mut no_pos = 0usize;
    let mut counts = Vec::new();
    for (si, sample) in ds.test_clean.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(si as u64);
        match pips_points(&nets, sample, pcfg.input_points, Some(0.0), &group, &mut rng) {
            Ok((_, s)) => counts.push(s.len()),
            Err(TrainError::Pips(_)) => {
                no_pos += 1;
                counts.push(0);
            }
            Err(e) => panic!("{e}"),
        }
        let _ = VoxelGrid::<bool>::fit(&sample.observed, h);
    }
    counts.sort_unstable();
    let ge3 = counts.iter().filter(|&&c| c >= 3).count();
    eprintln!(
        "coverage: no-positive {no_pos}, stable-point median {} p10 {} p90 {}, >=3 pts on {ge3}/100",
        counts[50], counts[10], counts[90]
    );
    let out = eval_student(
        None,
        &ds.test_clean,
        EvalQueries::PipsS { jitter: 0.01, dropout: 0.3 },
        Some(&nets),
        pcfg.input_points,
        7,
        &group,
    )
    .unwrap();
    eprintln!("oracle pips-s eval with 30% dropout: n_valid {}/{}", out.n_valid, out.n_total);
}
