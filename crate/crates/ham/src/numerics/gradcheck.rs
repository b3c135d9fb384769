use crate::error::{Error, Result};
use crate::numerics::{Graph, NamedTensors, Var};

#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    let denom = (a.abs() + n.abs()).max(1e-8);
    (a - n).abs() / denom
}

/// Compare analytic gradients against central finite differences for a
/// deterministic scalar-loss forward closure. The closure receives the
/// graph and one leaf var per parameter, in parameter order.
pub fn grad_check<F>(
    params: &mut NamedTensors,
    forward: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .entries
        .iter()
        .map(|e| g.leaf(&e.tensor))
        .collect::<Result<_>>()?;
    let loss = forward(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Shape("grad_check: loss must be scalar".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).to_vec()).collect();

    let eval = |params: &NamedTensors| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .entries
            .iter()
            .map(|e| g.leaf(&e.tensor))
            .collect::<Result<_>>()?;
        let loss = forward(&mut g, &vars)?;
        let v = g.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check forward".into()));
        }
        Ok(v)
    };

    let mut per_param = Vec::with_capacity(params.entries.len());
    for pi in 0..params.entries.len() {
        let name = params.entries[pi].name.clone();
        let mut worst = ParamGradReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..params.entries[pi].tensor.len() {
            let orig = params.entries[pi].tensor.data[j];
            params.entries[pi].tensor.data[j] = orig + step;
            let plus = eval(params).map_err(|e| match e {
                Error::NonFinite(_) => {
                    Error::NonFinite(format!("grad_check: {} element {}", name, j))
                }
                other => other,
            })?;
            params.entries[pi].tensor.data[j] = orig - step;
            let minus = eval(params).map_err(|e| match e {
                Error::NonFinite(_) => {
                    Error::NonFinite(format!("grad_check: {} element {}", name, j))
                }
                other => other,
            })?;
            params.entries[pi].tensor.data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][j];
            let err = rel_error(a, numeric);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_index = j;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        per_param,
        tolerance,
    })
}
