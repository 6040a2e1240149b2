//! Straight-line recomputation of the distillation loss over nested vectors.

pub struct OracleLoss {
    pub l_local: f64,
    pub l_global: f64,
    pub w1: f64,
    pub w2: f64,
    pub l_distill: f64,
}

type Rows = Vec<Vec<f64>>;

fn normalized(r: &[f64]) -> Vec<f64> {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    r.iter().map(|v| v / n).collect()
}

/// `weight` is `in x out` row-major, `teacher` one row of length `in`.
pub fn dcsd_loss(
    s: &Rows,
    teacher: &[f64],
    weight: &Rows,
    bias: &[f64],
    temperature: f64,
    logits: (f64, f64),
) -> OracleLoss {
    let n = s.len();
    let d = bias.len();
    let mut t_proj = bias.to_vec();
    for (i, &x) in teacher.iter().enumerate() {
        for k in 0..d {
            t_proj[k] += x * weight[i][k];
        }
    }
    // A single source row stretched to n rows repeats it.
    let t_align: Rows = vec![t_proj; n];

    let sn: Rows = s.iter().map(|r| normalized(r)).collect();
    let tn: Rows = t_align.iter().map(|r| normalized(r)).collect();
    let mut t_weighted = vec![vec![0.0; d]; n];
    for i in 0..n {
        let sims: Vec<f64> = (0..n)
            .map(|j| sn[i].iter().zip(&tn[j]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = sims.iter().map(|v| ((v - m) / temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for k in 0..d {
                t_weighted[i][k] += e[j] / z * t_align[j][k];
            }
        }
    }

    let mut sq = 0.0;
    for i in 0..n {
        for k in 0..d {
            sq += (s[i][k] - t_weighted[i][k]).powi(2);
        }
    }
    let l_local = sq / (n * d) as f64;

    let mut l1 = 0.0;
    for k in 0..d {
        let ms = s.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let mt = t_align.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        l1 += (ms - mt).abs();
    }
    let l_global = l1 / d as f64;

    let m = logits.0.max(logits.1);
    let (e1, e2) = ((logits.0 - m).exp(), (logits.1 - m).exp());
    let (w1, w2) = (e1 / (e1 + e2), e2 / (e1 + e2));
    OracleLoss {
        l_local,
        l_global,
        w1,
        w2,
        l_distill: w1 * l_local + w2 * l_global,
    }
}
