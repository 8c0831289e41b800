//! Plain-loop reference implementations of the cell equations, used to freeze
//! expected values. Nothing here shares code with the production kernels.

use crate::numerics::Matrix;
use crate::recurrent_cells::{CellParams, ComposeMode, ComposeParams};

fn mv(m: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..m.rows() {
        let mut s = 0.0;
        for j in 0..m.cols() {
            s += m.get(i, j) * x[j];
        }
        out.push(s);
    }
    out
}

fn sigma(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gru(p: &CellParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let (wr, ur) = (mv(&p.w_r, x), mv(&p.u_r, h));
    let (wz, uz) = (mv(&p.w_z, x), mv(&p.u_z, h));
    let d = h.len();
    let r: Vec<f64> = (0..d).map(|i| sigma(wr[i] + ur[i])).collect();
    let z: Vec<f64> = (0..d).map(|i| sigma(wz[i] + uz[i])).collect();
    let rh: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
    let (wx, uh) = (mv(&p.w, x), mv(&p.u, &rh));
    (0..d)
        .map(|i| z[i] * h[i] + (1.0 - z[i]) * (wx[i] + uh[i]).tanh())
        .collect()
}

pub fn compose(vs: &[Vec<f64>], mode: ComposeMode, g: Option<&ComposeParams>) -> Vec<f64> {
    let d = vs[0].len();
    match mode {
        ComposeMode::Pool => (0..d)
            .map(|i| vs.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        ComposeMode::Gate => {
            let g = g.expect("gate parameters");
            let raw: Vec<f64> = vs
                .iter()
                .map(|v| {
                    let mut a = g.b_g.get(0, 0);
                    for i in 0..d {
                        a += g.u_g.get(0, i) * v[i];
                    }
                    sigma(a)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            (0..d)
                .map(|i| vs.iter().zip(&raw).map(|(v, r)| r / total * v[i]).sum())
                .collect()
        }
    }
}

pub fn swl(
    p: &CellParams,
    pairs: &[(Vec<f64>, Vec<f64>)],
    mode: ComposeMode,
    gx: Option<&ComposeParams>,
    gh: Option<&ComposeParams>,
) -> Vec<f64> {
    let xs: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
    let hs: Vec<Vec<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
    gru(p, &compose(&xs, mode, gx), &compose(&hs, mode, gh))
}

pub fn dwl(p: &CellParams, pairs: &[(Vec<f64>, Vec<f64>)], mode: ComposeMode, gh: Option<&ComposeParams>) -> Vec<f64> {
    let branches: Vec<Vec<f64>> = pairs.iter().map(|(x, h)| gru(p, x, h)).collect();
    compose(&branches, mode, gh)
}
