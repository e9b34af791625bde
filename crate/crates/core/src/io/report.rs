//! CSV logs and reports.

use std::io::Write;

use crate::error::Result;
use crate::metrics::Metrics;
use crate::trainer::StepReport;

pub fn write_train_log<W: Write>(log: &[StepReport], w: &mut W) -> Result<()> {
    writeln!(w, "step,branch,L_seg,L_lc,L_rc,L_total,lr")?;
    for r in log {
        writeln!(w, "{},{},{},{},{},{},{}", r.step, r.branch, r.l_seg, r.l_lc, r.l_rc, r.l_total, r.lr)?;
    }
    Ok(())
}

/// One row per scene of every LAP step.
pub fn write_lap_diagnostics<W: Write>(log: &[StepReport], w: &mut W) -> Result<()> {
    writeln!(w, "step,scene,lds,mean_norm_gc,mean_norm_gf,zero_rows_c,zero_rows_f,class_counts")?;
    for r in log {
        for (j, d) in r.lap.iter().enumerate() {
            let counts: Vec<String> = d.class_counts.iter().map(usize::to_string).collect();
            writeln!(
                w,
                "{},{j},{},{},{},{},{},{}",
                r.step,
                d.lds,
                d.mean_norm_gc,
                d.mean_norm_gf,
                d.zero_rows_c,
                d.zero_rows_f,
                counts.join(" ")
            )?;
        }
    }
    Ok(())
}

/// Per-class IoU rows followed by a `miou` row. Classes without union are
/// written with an empty IoU.
pub fn write_metrics<W: Write>(metrics: &Metrics, class_names: &[&str], w: &mut W) -> Result<()> {
    writeln!(w, "class,name,intersection,union,support,iou,accuracy")?;
    for c in 0..metrics.num_classes() {
        let name = class_names.get(c).copied().unwrap_or("");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{c},{name},{},{},{},{},{}",
            metrics.intersection[c],
            metrics.union[c],
            metrics.support[c],
            opt(metrics.iou(c)),
            opt(metrics.accuracy(c))
        )?;
    }
    writeln!(w, "miou,,,,,{},", metrics.miou())?;
    Ok(())
}

pub fn write_validations<W: Write>(validations: &[(usize, Metrics)], w: &mut W) -> Result<()> {
    let k = validations.first().map_or(0, |(_, m)| m.num_classes());
    let header: Vec<String> = (0..k).map(|c| format!("iou_{c}")).collect();
    writeln!(w, "step,miou{}{}", if k > 0 { "," } else { "" }, header.join(","))?;
    for (step, m) in validations {
        let ious: Vec<String> = (0..k).map(|c| m.iou(c).map(|x| x.to_string()).unwrap_or_default()).collect();
        writeln!(w, "{step},{}{}{}", m.miou(), if k > 0 { "," } else { "" }, ious.join(","))?;
    }
    Ok(())
}
