use scatterlab::distributions::Seed;
use scatterlab::fixtures;
use scatterlab::linalg::{frobenius_distance, frobenius_distance_raw, SpdMatrix};
use scatterlab::scatter::{self, mcd_fit, ScatterSpec};

fn close(a: &SpdMatrix, b: &SpdMatrix, tol: f64) {
    let d = frobenius_distance(a, b).unwrap();
    assert!(d <= tol, "distance {d}\n{}\n{}", a.matrix(), b.matrix());
}

#[test]
fn closed_form_estimators_match_oracles() {
    for name in ["cross4", "six2d", "outlier1d"] {
        let f = fixtures::load(name).unwrap();
        close(&ScatterSpec::cov().estimate(&f.sample).unwrap().matrix, &f.matrix("cov").unwrap(), 1e-10);
    }
    for name in ["cross4", "six2d"] {
        let f = fixtures::load(name).unwrap();
        close(&ScatterSpec::cov4().estimate(&f.sample).unwrap().matrix, &f.matrix("cov4").unwrap(), 1e-10);
    }
}

#[test]
fn fixed_points_match_oracles() {
    let f = fixtures::load("cross4").unwrap();
    let tyler = ScatterSpec::tyler().estimate(&f.sample).unwrap().require_converged().unwrap();
    close(&tyler.matrix, &f.matrix("tyler").unwrap(), 1e-8);
    for nu in [1.0, 3.0, 10.0] {
        let raw = ScatterSpec::t_m(nu).estimate_raw(&f.sample).unwrap().require_converged().unwrap();
        close(&raw.matrix, &f.matrix("t_m_raw").unwrap(), 1e-8);
    }
}

#[test]
fn symmetrized_cov_is_half_the_difference_moment() {
    for name in ["cross4", "six2d"] {
        let f = fixtures::load(name).unwrap();
        let sym = scatter::symmetrize(&ScatterSpec::cov(), &f.sample).unwrap();
        let half = (f.matrix("difference_second_moment").unwrap().into_matrix()) / 2.0;
        assert!(frobenius_distance_raw(sym.matrix.matrix(), &half).unwrap() <= 1e-10, "{name}");
    }
}

#[test]
fn mcd_matches_enumeration() {
    let f = fixtures::load("outlier1d").unwrap();
    let h = f.scalar("mcd_h").unwrap();
    let n = f.sample.n() as f64;
    let fit = mcd_fit(&f.sample, h / n, 5, Seed(1)).unwrap();
    assert!(fit.exhaustive);
    assert_eq!(fit.subset, f.subset("mcd_subset").unwrap());
    let raw = f.matrix("mcd_raw").unwrap();
    assert!(frobenius_distance_raw(&fit.raw, raw.matrix()).unwrap() <= 1e-12);
    // the outlier dominates the classical estimate
    assert!(f.matrix("cov").unwrap().get(0, 0) > 1e4 * fit.raw[(0, 0)]);
}
