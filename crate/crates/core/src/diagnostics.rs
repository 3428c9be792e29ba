//! Measurements for the three weight-decay mechanisms and the per-epoch metric log.

use std::io::{Read, Write};
use std::path::Path;

use crate::curvature::{self, Metric};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::loss::{self, LossKind, Targets};
use crate::nn::{self, BnState, Mode, NetworkParams, NetworkSpec};

/// `η / ‖θ_l‖²`.
pub fn effective_lr(eta: f64, layer_norm: f64) -> Result<f64> {
    if !(layer_norm > 0.0) {
        return Err(Error::degenerate(format!("layer norm must be positive, got {layer_norm}")));
    }
    Ok(eta / (layer_norm * layer_norm))
}

/// Mean over rows of `‖∂f/∂x‖²_F`.
pub fn jacobian_frob_norm(spec: &NetworkSpec, params: &NetworkParams, x: &Matrix, mode: Mode<'_>) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::degenerate("empty evaluation set"));
    }
    let jac = nn::input_jacobians(spec, params, x, mode)?;
    Ok(jac.iter().map(linalg::frobenius_norm_sq).sum::<f64>() / x.rows() as f64)
}

/// How `norm_transfer` treats masked layers without BN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferPolicy {
    Strict,
    /// Log a warning and rescale anyway.
    Warn,
}

/// Rescales each masked layer to the reference norm.
pub fn norm_transfer(
    spec: &NetworkSpec,
    params: &NetworkParams,
    reference_norms: &[f64],
    mask: &[bool],
    policy: TransferPolicy,
) -> Result<NetworkParams> {
    let layers = spec.num_layers();
    if reference_norms.len() != layers || mask.len() != layers {
        return Err(Error::structural("reference norms and mask must have one entry per layer"));
    }
    let mut out = params.clone();
    for l in (0..layers).filter(|&l| mask[l]) {
        if !spec.bn_covered(l) {
            match policy {
                TransferPolicy::Strict => {
                    return Err(Error::Contract(format!(
                        "layer {l} is not followed by BN; rescaling it changes the function"
                    )))
                }
                TransferPolicy::Warn => log::warn!("norm transfer on layer {l}, which has no BN"),
            }
        }
        let target = reference_norms[l];
        if !(target > 0.0) {
            return Err(Error::domain(format!("reference norm of layer {l} must be positive")));
        }
        let current = linalg::frobenius_norm_sq(&params.weights[l]).sqrt();
        if current == 0.0 {
            return Err(Error::degenerate(format!("layer {l} has zero norm")));
        }
        out.weights[l] = params.weights[l].scale(target / current);
    }
    Ok(out)
}

pub fn generalization_gap(train_loss: f64, test_loss: f64) -> f64 {
    test_loss - train_loss
}

/// One row of a run's metric log. Quantities that were not measured are NaN.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub gen_gap: f64,
    pub jacobian_sq_norm: f64,
    pub gn_norm: f64,
    pub kfac_gn_norm: f64,
    pub layer_norms: Vec<f64>,
    pub effective_lr: Vec<f64>,
    /// `tr F(θ̂_l)`.
    pub fisher_trace: Vec<f64>,
    /// `tr G(θ̂_l)`.
    pub gn_trace: Vec<f64>,
    /// `λ‖θ_l‖² / (tr C(θ̂_l) / P_l)`.
    pub effective_damping: Vec<f64>,
}

impl MetricRecord {
    /// Bit-level equality that treats NaN as equal to NaN.
    pub fn same_bits(&self, other: &MetricRecord) -> bool {
        self.epoch == other.epoch && self.values().iter().zip(other.values()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn values(&self) -> Vec<f64> {
        let mut v = vec![
            self.lr,
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.test_loss,
            self.test_acc,
            self.gen_gap,
            self.jacobian_sq_norm,
            self.gn_norm,
            self.kfac_gn_norm,
        ];
        for series in [
            &self.layer_norms,
            &self.effective_lr,
            &self.fisher_trace,
            &self.gn_trace,
            &self.effective_damping,
        ] {
            v.extend_from_slice(series);
        }
        v
    }
}

const SCALAR_FIELDS: [&str; 11] = [
    "lr",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "test_loss",
    "test_acc",
    "gen_gap",
    "jacobian_sq_norm",
    "gn_norm",
    "kfac_gn_norm",
];
const LAYER_FIELDS: [&str; 5] = ["layer_norm", "effective_lr", "fisher_trace", "gn_trace", "effective_damping"];

/// 17 significant digits, enough to round-trip any f64.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// The metric log of one run, written as CSV with a header naming every column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub layers: usize,
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn new(layers: usize) -> Self {
        MetricLog {
            layers,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        let lens = [
            r.layer_norms.len(),
            r.effective_lr.len(),
            r.fisher_trace.len(),
            r.gn_trace.len(),
            r.effective_damping.len(),
        ];
        if lens.iter().any(|&n| n != self.layers) {
            return Err(Error::structural(format!("record has per-layer series of lengths {lens:?}, log has {} layers", self.layers)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["epoch".to_string()];
        h.extend(SCALAR_FIELDS.iter().map(|s| s.to_string()));
        for f in LAYER_FIELDS {
            h.extend((0..self.layers).map(|l| format!("{f}_{l}")));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header()).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string()];
            row.extend(r.values().into_iter().map(format_f64));
            wr.write_record(row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let per_layer = header.len().checked_sub(1 + SCALAR_FIELDS.len()).unwrap_or(0);
        if per_layer % LAYER_FIELDS.len() != 0 {
            return Err(Error::Config(format!("metric header has {} columns", header.len())));
        }
        let mut log = MetricLog::new(per_layer / LAYER_FIELDS.len());
        if log.header() != header {
            return Err(Error::Config("metric header does not match the expected columns".into()));
        }
        for row in rd.records() {
            let row = row.map_err(csv_err)?;
            let epoch = row[0]
                .parse()
                .map_err(|e| Error::Config(format!("bad epoch {:?}: {e}", &row[0])))?;
            let vals: Vec<f64> = row
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad value {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            let (scalars, rest) = vals.split_at(SCALAR_FIELDS.len());
            let series: Vec<Vec<f64>> = rest.chunks(log.layers.max(1)).map(<[f64]>::to_vec).collect();
            let get = |i: usize| series.get(i).cloned().unwrap_or_default();
            log.push(MetricRecord {
                epoch,
                lr: scalars[0],
                train_loss: scalars[1],
                train_acc: scalars[2],
                val_loss: scalars[3],
                val_acc: scalars[4],
                test_loss: scalars[5],
                test_acc: scalars[6],
                gen_gap: scalars[7],
                jacobian_sq_norm: scalars[8],
                gn_norm: scalars[9],
                kfac_gn_norm: scalars[10],
                layer_norms: get(0),
                effective_lr: get(1),
                fisher_trace: get(2),
                gn_trace: get(3),
                effective_damping: get(4),
            })?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("CSV: {other:?}")),
    }
}

/// Which of the more expensive diagnostics to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticToggles {
    pub jacobian: bool,
    pub gn_norms: bool,
    pub traces: bool,
}

impl Default for DiagnosticToggles {
    fn default() -> Self {
        DiagnosticToggles {
            jacobian: true,
            gn_norms: true,
            traces: false,
        }
    }
}

/// A labelled split.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

/// Everything `record_metrics` reads.
pub struct MetricInputs<'a> {
    pub epoch: usize,
    pub lr: f64,
    pub spec: &'a NetworkSpec,
    pub params: &'a NetworkParams,
    pub bn_state: &'a BnState,
    pub loss: LossKind,
    pub train: Split<'a>,
    pub val: Option<Split<'a>>,
    pub test: Option<Split<'a>>,
    /// Held-out rows for the input-Jacobian norm.
    pub jacobian_x: &'a Matrix,
    /// Training rows for curvature quantities (batch statistics).
    pub curvature_x: &'a Matrix,
    pub toggles: DiagnosticToggles,
    /// Damping and metric for the effective-damping ratio.
    pub damping: Option<(f64, Metric)>,
}

/// Eval-mode mean loss and accuracy of a split.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &NetworkParams,
    bn_state: &BnState,
    loss_kind: LossKind,
    split: Split<'_>,
) -> Result<(f64, f64)> {
    let (logits, _) = nn::forward(spec, params, split.x, Mode::Eval(bn_state))?;
    let l = match loss_kind {
        LossKind::CrossEntropySoftmax => loss::loss_and_grad(loss_kind, &logits, Targets::Labels(split.y))?.0,
        LossKind::SquaredError => {
            let k = spec.output_dim();
            let onehot = Matrix::from_fn(split.y.len(), k, |r, c| f64::from(u8::from(split.y[r] == c)));
            loss::loss_and_grad(loss_kind, &logits, Targets::Values(&onehot))?.0
        }
    };
    Ok((l, loss::accuracy(&logits, split.y)))
}

pub fn record_metrics(inp: &MetricInputs<'_>) -> Result<MetricRecord> {
    let spec = inp.spec;
    let params = inp.params;
    let layers = spec.num_layers();
    let nan_series = || vec![f64::NAN; layers];
    let (train_loss, train_acc) = evaluate(spec, params, inp.bn_state, inp.loss, inp.train)?;
    let (val_loss, val_acc) = match inp.val {
        Some(s) => evaluate(spec, params, inp.bn_state, inp.loss, s)?,
        None => (f64::NAN, f64::NAN),
    };
    let (test_loss, test_acc) = match inp.test {
        Some(s) => evaluate(spec, params, inp.bn_state, inp.loss, s)?,
        None => (f64::NAN, f64::NAN),
    };
    let layer_norms = nn::layer_norms(params);
    let effective_lr = layer_norms
        .iter()
        .map(|&n| effective_lr(inp.lr, n).unwrap_or(f64::NAN))
        .collect();
    let jacobian_sq_norm = if inp.toggles.jacobian && inp.jacobian_x.rows() > 0 {
        jacobian_frob_norm(spec, params, inp.jacobian_x, Mode::Eval(inp.bn_state))?
    } else {
        f64::NAN
    };
    let (gn_norm, kfac_gn_norm) = if inp.toggles.gn_norms {
        let exact = if spec.use_bias || spec.has_bn() {
            f64::NAN
        } else {
            curvature::gn_norm(spec, params, inp.curvature_x)?
        };
        (exact, curvature::kfac_gn_norm(spec, params, inp.curvature_x)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    let (mut fisher_trace, mut gn_trace, mut effective_damping) = (nan_series(), nan_series(), nan_series());
    if inp.toggles.traces {
        let t = curvature::layer_traces(spec, params, inp.curvature_x, inp.loss)?;
        for l in 0..layers {
            let sq = layer_norms[l] * layer_norms[l];
            fisher_trace[l] = sq * t.fisher[l];
            gn_trace[l] = sq * t.gn[l];
            if let Some((lambda, metric)) = inp.damping {
                let tr = match metric {
                    Metric::Fisher => fisher_trace[l],
                    Metric::Gn => gn_trace[l],
                };
                let per_param = tr / spec.layer_param_count(l) as f64;
                effective_damping[l] = lambda * sq / per_param;
            }
        }
    }
    Ok(MetricRecord {
        epoch: inp.epoch,
        lr: inp.lr,
        train_loss,
        train_acc,
        val_loss,
        val_acc,
        test_loss,
        test_acc,
        gen_gap: generalization_gap(train_loss, test_loss),
        jacobian_sq_norm,
        gn_norm,
        kfac_gn_norm,
        layer_norms,
        effective_lr,
        fisher_trace,
        gn_trace,
        effective_damping,
    })
}
