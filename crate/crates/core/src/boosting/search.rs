use serde::{Deserialize, Serialize};

/// Golden-section settings for the step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub alpha_max: f64,
    pub tol: f64,
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Minimizes a convex `risk` over `[0, alpha_max]`.
///
/// Returns `(alpha, risk(alpha))`. The interval is shrunk until narrower
/// than `tol`; its midpoint then competes with both endpoints, so the
/// result never exceeds `risk(0)`. Ties prefer the smaller step.
pub fn golden_section<F: FnMut(f64) -> f64>(mut risk: F, settings: LineSearch) -> (f64, f64) {
    let r0 = risk(0.0);
    let (mut a, mut b) = (0.0, settings.alpha_max);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (risk(c), risk(d));
    while b - a > settings.tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = risk(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = risk(d);
        }
    }
    let mid = a + (b - a) / 2.0;
    let mut best = (0.0, r0);
    for alpha in [mid, settings.alpha_max] {
        let r = risk(alpha);
        if r < best.1 {
            best = (alpha, r);
        }
    }
    best
}

/// Risk reduction and cost of one candidate stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub delta: f64,
    pub cost: f64,
}

impl CandidateScore {
    pub fn ratio(&self) -> f64 {
        self.delta / self.cost
    }
}

/// Index of the candidate with the largest `delta / cost`; ties go to the
/// lower cost, then the earlier candidate. `None` when the list is empty.
pub fn speedboost_select(candidates: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &candidates[b];
                c.ratio() > cur.ratio() || (c.ratio() == cur.ratio() && c.cost < cur.cost)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}
