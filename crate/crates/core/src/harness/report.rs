use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, ResultRow};
use crate::classifier::TrainRegime;
use crate::corpus::Label;
use crate::gan::GanVariant;

const RESULTS_HEADER: &str = "image_size,regime,gan_variant,seed,accuracy,precision,recall,f1,specificity,fid_inf";
pub const FID_VS_EPOCH_HEADER: &str = "gan_variant,image_size,seed,label,epoch,fid_inf,is_anomaly";
pub const F1_VS_SIZE_HEADER: &str = "regime,gan_variant,image_size,f1_median,f1_min,f1_max,n_seeds";

/// One checkpoint of one class GAN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidSeriesRow {
    pub gan_variant: GanVariant,
    pub image_size: usize,
    pub seed: u64,
    pub label: Label,
    pub epoch: usize,
    pub fid_inf: f64,
    pub is_anomaly: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn variant_str(v: Option<GanVariant>) -> &'static str {
    v.map_or("", GanVariant::as_str)
}

/// `results.csv`: one line per row. Floats use shortest round-trip form and
/// undefined metrics are empty. Wall time lives in `timings.csv`.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.image_size,
            r.regime,
            variant_str(r.gan_variant),
            r.seed,
            opt(r.accuracy),
            opt(r.precision),
            opt(r.recall),
            opt(r.f1),
            opt(r.specificity),
            opt(r.fid_inf)
        ));
    }
    out
}

/// Parses [`results_csv`] output; wall times read back as 0.
pub fn read_results_csv(text: &str) -> Result<Vec<ResultRow>, HarnessError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| HarnessError::Artifact(format!("results.csv: {m}"));
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 10 {
            return Err(bad(format!("{} fields", rec.len())));
        }
        let num = |i: usize| -> Result<Option<f64>, HarnessError> {
            match &rec[i] {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(format!("bad number {s:?}"))),
            }
        };
        rows.push(ResultRow {
            image_size: rec[0].parse().map_err(|_| bad(format!("bad size {:?}", &rec[0])))?,
            regime: rec[1].parse().map_err(|e: crate::classifier::ClassifierError| bad(e.to_string()))?,
            gan_variant: match &rec[2] {
                "" => None,
                s => Some(s.parse().map_err(|e: crate::gan::GanError| bad(e.to_string()))?),
            },
            seed: rec[3].parse().map_err(|_| bad(format!("bad seed {:?}", &rec[3])))?,
            accuracy: num(4)?,
            precision: num(5)?,
            recall: num(6)?,
            f1: num(7)?,
            specificity: num(8)?,
            fid_inf: num(9)?,
            wall_time_s: 0.0,
        });
    }
    Ok(rows)
}

pub(crate) fn fid_series_csv(series: &[FidSeriesRow]) -> String {
    let mut out = format!("{FID_VS_EPOCH_HEADER}\n");
    for p in series {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.gan_variant, p.image_size, p.seed, p.label, p.epoch, p.fid_inf, p.is_anomaly
        ));
    }
    out
}

/// Median of the values, `None` when empty.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn row_name(regime: TrainRegime, variant: Option<GanVariant>) -> String {
    let v = match variant {
        Some(GanVariant::WganGp) => "WGAN-GP",
        Some(GanVariant::Dcgan) => "DCGAN",
        None => "",
    };
    match regime {
        TrainRegime::Model1 => "Real data".into(),
        TrainRegime::Model2 => v.into(),
        TrainRegime::Model3 => format!("Real+{v}"),
    }
}

type GroupKey = (usize, TrainRegime, Option<GanVariant>);

fn groups(rows: &[ResultRow]) -> BTreeMap<GroupKey, Vec<&ResultRow>> {
    let mut g: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        g.entry((r.image_size, r.regime, r.gan_variant)).or_default().push(r);
    }
    g
}

/// One table per image size with seed-median metrics per regime.
pub fn tables_markdown(rows: &[ResultRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let mut out = String::from("# Results\n\nMedians over seeds; n/a marks undefined metrics.\n");
    let mut current = None;
    for ((size, regime, variant), rs) in groups(rows) {
        if current != Some(size) {
            current = Some(size);
            out.push_str(&format!(
                "\n## Results at image size {size}x{size}\n\n\
                 | Training data | Accuracy | Precision | Recall | F1 | Specificity | FID∞ | Seeds |\n\
                 |---|---|---|---|---|---|---|---|\n"
            ));
        }
        let m = |f: fn(&ResultRow) -> Option<f64>| median(rs.iter().filter_map(|r| f(r)));
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            row_name(regime, variant),
            fmt(m(|r| r.accuracy)),
            fmt(m(|r| r.precision)),
            fmt(m(|r| r.recall)),
            fmt(m(|r| r.f1)),
            fmt(m(|r| r.specificity)),
            m(|r| r.fid_inf).map_or("".to_string(), |x| format!("{x:.1}")),
            rs.len()
        ));
    }
    out
}

/// One matched (size, seed) pair of Model 2 cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantPair {
    pub image_size: usize,
    pub seed: u64,
    pub wgan_f1: f64,
    pub dcgan_f1: f64,
    /// WGAN-GP minus DCGAN.
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantComparison {
    pub pairs: Vec<VariantPair>,
    /// Matched (size, seed) cells where either F1 is undefined.
    pub undefined: Vec<(usize, u64)>,
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
    pub median_diff: f64,
    pub median_wgan_f1: f64,
    pub median_dcgan_f1: f64,
}

impl VariantComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_size,seed,wgan_f1,dcgan_f1,diff\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{},{},{},{}\n", p.image_size, p.seed, p.wgan_f1, p.dcgan_f1, p.diff));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "WGAN-GP vs DCGAN, synthetic-only classifiers, {} matched pairs\n\n\
             WGAN-GP better: {}\nDCGAN better: {}\ntied: {}\n\n\
             median F1: WGAN-GP {:.3}, DCGAN {:.3}\nmedian paired difference: {:+.3}\n\n",
            self.pairs.len(),
            self.positive,
            self.negative,
            self.zero,
            self.median_wgan_f1,
            self.median_dcgan_f1,
            self.median_diff
        );
        if !self.undefined.is_empty() {
            out.push_str(&format!("{} more pairs skipped for undefined F1\n\n", self.undefined.len()));
        }
        for p in &self.pairs {
            out.push_str(&format!(
                "- {}px seed {}: {:.3} vs {:.3} ({:+.3})\n",
                p.image_size, p.seed, p.wgan_f1, p.dcgan_f1, p.diff
            ));
        }
        out
    }
}

/// Paired per-(size, seed) F1 differences between the Model 2 cells of the
/// two variants.
pub fn compare_variants(rows: &[ResultRow]) -> Result<VariantComparison, HarnessError> {
    let mut by_key: BTreeMap<(usize, u64), [Option<Option<f64>>; 2]> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.regime == TrainRegime::Model2) {
        let k = match r.gan_variant {
            Some(GanVariant::WganGp) => 0,
            Some(GanVariant::Dcgan) => 1,
            None => return Err(HarnessError::UnmatchedCells(format!("model2 row without variant at {}px", r.image_size))),
        };
        let slot = &mut by_key.entry((r.image_size, r.seed)).or_default()[k];
        if slot.is_some() {
            return Err(HarnessError::UnmatchedCells(format!("duplicate row at {}px seed {}", r.image_size, r.seed)));
        }
        *slot = Some(r.f1);
    }
    if by_key.is_empty() {
        return Err(HarnessError::UnmatchedCells("no model2 rows".into()));
    }
    let (mut pairs, mut undefined) = (Vec::new(), Vec::new());
    for ((image_size, seed), [w, d]) in by_key {
        match (w, d) {
            (Some(Some(w)), Some(Some(d))) => pairs.push(VariantPair { image_size, seed, wgan_f1: w, dcgan_f1: d, diff: w - d }),
            (Some(_), Some(_)) => undefined.push((image_size, seed)),
            _ => return Err(HarnessError::UnmatchedCells(format!("{image_size}px seed {seed} lacks a partner"))),
        }
    }
    if pairs.is_empty() {
        return Err(HarnessError::UnmatchedCells("no matched pair has a defined f1".into()));
    }
    let count = |f: fn(f64) -> bool| pairs.iter().filter(|p| f(p.diff)).count();
    Ok(VariantComparison {
        positive: count(|d| d > 0.0),
        negative: count(|d| d < 0.0),
        zero: count(|d| d == 0.0),
        median_diff: median(pairs.iter().map(|p| p.diff)).expect("non-empty"),
        median_wgan_f1: median(pairs.iter().map(|p| p.wgan_f1)).expect("non-empty"),
        median_dcgan_f1: median(pairs.iter().map(|p| p.dcgan_f1)).expect("non-empty"),
        pairs,
        undefined,
    })
}

const PLOTS_README: &str = "# Plot data

## fid_vs_epoch.csv

FID∞ of each class GAN at each checkpoint, one row per checkpoint.

- gan_variant: wgan-gp or dcgan
- image_size: size the GAN was trained at
- seed: experiment seed
- label: class the GAN models
- epoch: checkpoint epoch, 0 is the initial model
- fid_inf: FID∞ of a fixed generated batch against the class's GAN training images
- is_anomaly: true when the point is a robust outlier of its series

## f1_vs_size.csv

Test F1 per training regime across image sizes, one row per (regime, variant, size).

- regime: model1 (real), model2 (synthetic), model3 (real + synthetic)
- gan_variant: empty for model1
- image_size: classifier input size
- f1_median, f1_min, f1_max: over seeds with a defined F1
- n_seeds: completed cells in the group
";

/// Writes `fid_vs_epoch.csv`, `f1_vs_size.csv` and a README describing their
/// columns into `dir`. Returns the written paths.
pub fn emit_plot_data(rows: &[ResultRow], series: &[FidSeriesRow], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut f1 = format!("{F1_VS_SIZE_HEADER}\n");
    for ((size, regime, variant), rs) in groups(rows) {
        let vals: Vec<f64> = rs.iter().filter_map(|r| r.f1).collect();
        let lo = vals.iter().copied().reduce(f64::min);
        let hi = vals.iter().copied().reduce(f64::max);
        f1.push_str(&format!(
            "{regime},{},{size},{},{},{},{}\n",
            variant_str(variant),
            opt(median(vals.iter().copied())),
            opt(lo),
            opt(hi),
            rs.len()
        ));
    }
    let files = [
        ("fid_vs_epoch.csv", fid_series_csv(series)),
        ("f1_vs_size.csv", f1),
        ("README.md", PLOTS_README.to_string()),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}
