use nalgebra::DMatrix;
use spfmm::basis::{TensorTransform, WaveletSpec};
use spfmm::grid::SurfaceGrid;
use spfmm::wavelet::{dwt1d, idwt1d, Boundary, DecompPlan, FilterKind};

#[test]
#[ignore]
fn probe_reflection_rank() {
    // per-axis synthesis vectors for the meridional (reflection) plan
    let plan = DecompPlan::new(32, FilterKind::Db3, 3, Boundary::Reflection).unwrap();
    let k1 = plan.total_len();
    println!("k1 = {k1}, bands {:?} approx {}", plan.band_lens, plan.approx_len());
    let mut synth = DMatrix::zeros(32, k1);
    for k in 0..k1 {
        let mut e = vec![0.0; k1];
        e[k] = 1.0;
        let x = idwt1d(&e, &plan).unwrap();
        for (i, v) in x.iter().enumerate() {
            synth[(i, k)] = *v;
        }
    }
    let svd = synth.clone().svd(false, false);
    let sv = svd.singular_values;
    println!("rank-ish singular values: max {} min {}", sv.max(), sv.min());
    // check pairwise identical columns
    for a in 0..k1 {
        for b in a + 1..k1 {
            let d = (synth.column(a) - synth.column(b)).amax();
            let da = (synth.column(a) + synth.column(b)).amax();
            if d < 1e-12 || da < 1e-12 {
                println!("columns {a} and {b} identical (diff {d}, sum {da})");
            }
            let na = synth.column(a).amax();
            if na < 1e-14 && b == a + 1 {
                println!("column {a} is ZERO");
            }
        }
    }
    // zero columns
    for a in 0..k1 {
        if synth.column(a).amax() < 1e-14 {
            println!("zero column {a}");
        }
    }

    // which columns does a smooth signal load on?
    let grid = SurfaceGrid::new(32, 32).unwrap();
    let spec = WaveletSpec { levels: 3, ..WaveletSpec::default() };
    let tr = TensorTransform::new(grid, spec).unwrap();
    let smooth: Vec<f64> = (0..32).map(|i| 2.0 + (i as f64 / 7.0).sin()).collect();
    let c = dwt1d(&smooth, &plan).unwrap();
    let mut idx: Vec<usize> = (0..k1).collect();
    idx.sort_by(|&a, &b| c[b].abs().partial_cmp(&c[a].abs()).unwrap());
    println!("top meridional coefficients: {:?}", &idx[..12]);
    let _ = tr;
}
