//! DAVIS-style evaluation: region similarity J (IoU), boundary accuracy F
//! (contour precision/recall with a pixel tolerance), and their aggregation
//! into per-object mean / recall / decay plus an overall report.

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Intersection over union. Both masks empty counts as a perfect 1.0;
/// exactly one empty is 0.0.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims(pred, gt)?;
    let inter = pred.intersection_count(gt);
    let a = pred.count();
    let b = gt.count();
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    if a == 0 || b == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with a background or out-of-frame 4-neighbor.
pub fn boundary_pixels(mask: &Mask) -> Mask {
    Mask::from_fn(mask.h, mask.w, |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        y == 0
            || x == 0
            || y == mask.h - 1
            || x == mask.w - 1
            || !mask.get(y - 1, x)
            || !mask.get(y + 1, x)
            || !mask.get(y, x - 1)
            || !mask.get(y, x + 1)
    })
}

/// Chebyshev (box) dilation by `radius`.
fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as isize;
    let mut out = Mask::new(mask.h, mask.w);
    for (y, x) in mask.coords() {
        let y0 = (y as isize - r).max(0) as usize;
        let y1 = ((y as isize + r) as usize).min(mask.h - 1);
        let x0 = (x as isize - r).max(0) as usize;
        let x1 = ((x as isize + r) as usize).min(mask.w - 1);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                out.set(yy, xx, true);
            }
        }
    }
    out
}

/// Contour F-measure: precision = fraction of predicted boundary pixels
/// within `tol_px` (Chebyshev) of the ground-truth boundary, recall the
/// symmetric quantity, F their harmonic mean.
pub fn boundary_f(pred: &Mask, gt: &Mask, tol_px: usize) -> Result<f64> {
    check_dims(pred, gt)?;
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    let np = pb.count();
    let ng = gb.count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gb_zone = dilate(&gb, tol_px);
    let pb_zone = dilate(&pb, tol_px);
    let hit_p = pb.data.iter().zip(&gb_zone.data).filter(|(&a, &b)| a && b).count();
    let hit_g = gb.data.iter().zip(&pb_zone.data).filter(|(&a, &b)| a && b).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Default boundary tolerance: ceil(0.008 * image diagonal), the public
/// benchmark toolkit convention.
pub fn default_boundary_tol(h: usize, w: usize) -> usize {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Per-sequence statistics of a per-frame quality series.
///
/// mean: plain average. recall: fraction strictly above 0.5. decay: mean of
/// the first quartile bin minus mean of the last, with the series split into
/// 4 contiguous bins of near-equal size (remainder spread to earlier bins).
/// Series shorter than 4 use the first/last non-empty bins.
pub fn sequence_stats(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::Data("sequence_stats on empty list".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let recall = values.iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;

    let q = n / 4;
    let r = n % 4;
    let mut bins: Vec<&[f64]> = Vec::with_capacity(4);
    let mut start = 0;
    for b in 0..4 {
        let len = q + usize::from(b < r);
        bins.push(&values[start..start + len]);
        start += len;
    }
    let first = bins.iter().find(|b| !b.is_empty()).unwrap();
    let last = bins.iter().rev().find(|b| !b.is_empty()).unwrap();
    let avg = |b: &[f64]| b.iter().sum::<f64>() / b.len() as f64;
    let decay = avg(first) - avg(last);
    Ok((mean, recall, decay))
}

/// Per-object and aggregate J/F statistics.
#[derive(Debug, Clone)]
pub struct ObjectStats {
    pub object_id: u32,
    pub j_mean: f64,
    pub j_recall: f64,
    pub j_decay: f64,
    pub f_mean: f64,
    pub f_recall: f64,
    pub f_decay: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub objects: Vec<ObjectStats>,
    pub j_mean: f64,
    pub j_recall: f64,
    pub j_decay: f64,
    pub f_mean: f64,
    pub f_recall: f64,
    pub f_decay: f64,
    pub jf_mean: f64,
}

/// Evaluate aligned per-object mask sequences. Frame 0 carries the given
/// mask in the semi-supervised protocol and is excluded from every statistic.
pub fn evaluate(
    pred_seqs: &[(u32, Vec<Mask>)],
    gt_seqs: &[(u32, Vec<Mask>)],
    tol_px: usize,
) -> Result<EvalReport> {
    if pred_seqs.len() != gt_seqs.len() {
        return Err(Error::Data(format!(
            "object count mismatch: {} predictions vs {} ground truths",
            pred_seqs.len(),
            gt_seqs.len()
        )));
    }
    let mut objects = Vec::with_capacity(pred_seqs.len());
    for ((pid, pred), (gid, gt)) in pred_seqs.iter().zip(gt_seqs) {
        if pid != gid {
            return Err(Error::Data(format!("object id mismatch: {pid} vs {gid}")));
        }
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "sequence length mismatch for object {pid}: {} vs {}",
                pred.len(),
                gt.len()
            )));
        }
        if pred.len() < 2 {
            return Err(Error::Data(format!(
                "object {pid}: need at least 2 frames (frame 0 is excluded from scoring)"
            )));
        }
        let mut js = Vec::with_capacity(pred.len() - 1);
        let mut fs = Vec::with_capacity(pred.len() - 1);
        for (p, g) in pred.iter().zip(gt).skip(1) {
            js.push(jaccard(p, g)?);
            fs.push(boundary_f(p, g, tol_px)?);
        }
        let (jm, jr, jd) = sequence_stats(&js)?;
        let (fm, fr, fd) = sequence_stats(&fs)?;
        objects.push(ObjectStats {
            object_id: *pid,
            j_mean: jm,
            j_recall: jr,
            j_decay: jd,
            f_mean: fm,
            f_recall: fr,
            f_decay: fd,
        });
    }
    let n = objects.len() as f64;
    let avg = |f: fn(&ObjectStats) -> f64| objects.iter().map(f).sum::<f64>() / n;
    let j_mean = avg(|o| o.j_mean);
    let f_mean = avg(|o| o.f_mean);
    Ok(EvalReport {
        j_mean,
        j_recall: avg(|o| o.j_recall),
        j_decay: avg(|o| o.j_decay),
        f_mean,
        f_recall: avg(|o| o.f_recall),
        f_decay: avg(|o| o.f_decay),
        jf_mean: 0.5 * (j_mean + f_mean),
        objects,
    })
}

impl EvalReport {
    /// Flat text table, one row per object plus OVERALL.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str("object      J-mean  J-recall J-decay  F-mean  F-recall F-decay\n");
        for o in &self.objects {
            s.push_str(&format!(
                "{:<10}  {:.4}  {:.4}   {:+.4}  {:.4}  {:.4}   {:+.4}\n",
                o.object_id, o.j_mean, o.j_recall, o.j_decay, o.f_mean, o.f_recall, o.f_decay
            ));
        }
        s.push_str(&format!(
            "{:<10}  {:.4}  {:.4}   {:+.4}  {:.4}  {:.4}   {:+.4}\n",
            "OVERALL", self.j_mean, self.j_recall, self.j_decay, self.f_mean, self.f_recall, self.f_decay
        ));
        s.push_str(&format!("J&F-mean    {:.4}\n", self.jf_mean));
        s
    }

    /// Machine-readable CSV with the same rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("object_id,j_mean,j_recall,j_decay,f_mean,f_recall,f_decay\n");
        for o in &self.objects {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                o.object_id, o.j_mean, o.j_recall, o.j_decay, o.f_mean, o.f_recall, o.f_decay
            ));
        }
        s.push_str(&format!(
            "OVERALL,{},{},{},{},{},{}\n",
            self.j_mean, self.j_recall, self.j_decay, self.f_mean, self.f_recall, self.f_decay
        ));
        s
    }
}

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.h != b.h {
        return Err(Error::dim("height", a.h, b.h, "mask comparison"));
    }
    if a.w != b.w {
        return Err(Error::dim("width", a.w, b.w, "mask comparison"));
    }
    Ok(())
}
