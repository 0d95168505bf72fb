//! Disk formats: 8-bit RGB PNG frames and per-sequence label CSVs.
//!
//! Label CSV header: `timestamp_us,fx_N,fy_N,fz_N[,slip,mu][,dx_mm,dy_mm,
//! dtheta_deg][,grasp_success][,textile_id]` — column groups are optional
//! by task.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::tasks::labels::{ForceLabel, PoseDelta, SlipState};

/// One labeled sample joined to a frame by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub timestamp_us: i64,
    pub force: ForceLabel,
    pub slip: Option<(SlipState, f64)>,
    pub pose: Option<PoseDelta>,
    pub grasp_success: Option<bool>,
    pub textile_id: Option<u32>,
}

pub fn save_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push((img[[y, x, ch]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let im = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    im.save(path).map_err(|e| Error::Image(e.to_string()))
}

pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let im = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = im.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in im.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = p.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn write_label_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let has_slip = rows.iter().any(|r| r.slip.is_some());
    let has_pose = rows.iter().any(|r| r.pose.is_some());
    let has_grasp = rows.iter().any(|r| r.grasp_success.is_some());
    let has_textile = rows.iter().any(|r| r.textile_id.is_some());

    let mut header: Vec<&str> = vec!["timestamp_us", "fx_N", "fy_N", "fz_N"];
    if has_slip {
        header.extend(["slip", "mu"]);
    }
    if has_pose {
        header.extend(["dx_mm", "dy_mm", "dtheta_deg"]);
    }
    if has_grasp {
        header.push("grasp_success");
    }
    if has_textile {
        header.push("textile_id");
    }

    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = vec![
            r.timestamp_us.to_string(),
            format!("{:.9}", r.force.fx),
            format!("{:.9}", r.force.fy),
            format!("{:.9}", r.force.fz),
        ];
        if has_slip {
            let (state, mu) = r
                .slip
                .ok_or_else(|| Error::invalid("inconsistent slip columns"))?;
            rec.push(match state {
                SlipState::Slip => "1".into(),
                SlipState::NoSlip => "0".into(),
            });
            rec.push(format!("{mu:.9}"));
        }
        if has_pose {
            let p = r
                .pose
                .ok_or_else(|| Error::invalid("inconsistent pose columns"))?;
            rec.push(format!("{:.9}", p.dx_mm));
            rec.push(format!("{:.9}", p.dy_mm));
            rec.push(format!("{:.9}", p.dtheta_deg));
        }
        if has_grasp {
            let g = r
                .grasp_success
                .ok_or_else(|| Error::invalid("inconsistent grasp columns"))?;
            rec.push(if g { "1".into() } else { "0".into() });
        }
        if has_textile {
            let t = r
                .textile_id
                .ok_or_else(|| Error::invalid("inconsistent textile columns"))?;
            rec.push(t.to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_label_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (c_ts, c_fx, c_fy, c_fz) = match (
        col("timestamp_us"),
        col("fx_N"),
        col("fy_N"),
        col("fz_N"),
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => {
            return Err(Error::Manifest(format!(
                "{}: label csv missing required columns",
                path.display()
            )))
        }
    };
    let c_slip = col("slip");
    let c_mu = col("mu");
    let c_dx = col("dx_mm");
    let c_dy = col("dy_mm");
    let c_dt = col("dtheta_deg");
    let c_grasp = col("grasp_success");
    let c_textile = col("textile_id");

    let parse_f = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
        rec.get(i)
            .ok_or_else(|| Error::Manifest("short csv row".into()))?
            .parse::<f64>()
            .map_err(|e| Error::Manifest(format!("bad float: {e}")))
    };

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let force = ForceLabel::new(
            parse_f(&rec, c_fx)?,
            parse_f(&rec, c_fy)?,
            parse_f(&rec, c_fz)?,
        );
        let slip = match (c_slip, c_mu) {
            (Some(cs), Some(cm)) => {
                let s = if parse_f(&rec, cs)? > 0.5 {
                    SlipState::Slip
                } else {
                    SlipState::NoSlip
                };
                Some((s, parse_f(&rec, cm)?))
            }
            _ => None,
        };
        let pose = match (c_dx, c_dy, c_dt) {
            (Some(cx), Some(cy), Some(ct)) => Some(PoseDelta {
                dx_mm: parse_f(&rec, cx)?,
                dy_mm: parse_f(&rec, cy)?,
                dtheta_deg: parse_f(&rec, ct)?,
            }),
            _ => None,
        };
        let grasp_success = match c_grasp {
            Some(cg) => Some(parse_f(&rec, cg)? > 0.5),
            None => None,
        };
        let textile_id = match c_textile {
            Some(ct) => Some(parse_f(&rec, ct)? as u32),
            None => None,
        };
        out.push(LabelRow {
            timestamp_us: parse_f(&rec, c_ts)? as i64,
            force,
            slip,
            pose,
            grasp_success,
            textile_id,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        let img = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 3) % 256) as f64 / 255.0
        });
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn label_csv_roundtrip_full_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let rows = vec![
            LabelRow {
                timestamp_us: 0,
                force: ForceLabel::new(0.1, -0.2, 1.5),
                slip: Some((SlipState::NoSlip, 0.8)),
                pose: Some(PoseDelta {
                    dx_mm: 0.5,
                    dy_mm: -0.25,
                    dtheta_deg: 0.1,
                }),
                grasp_success: Some(true),
                textile_id: Some(7),
            },
            LabelRow {
                timestamp_us: 16667,
                force: ForceLabel::new(1.4, 0.0, 1.0),
                slip: Some((SlipState::Slip, 0.8)),
                pose: Some(PoseDelta {
                    dx_mm: 1.0,
                    dy_mm: 0.0,
                    dtheta_deg: -0.5,
                }),
                grasp_success: Some(true),
                textile_id: Some(7),
            },
        ];
        write_label_csv(&p, &rows).unwrap();
        let back = read_label_csv(&p).unwrap();
        assert_eq!(rows.len(), back.len());
        for (a, b) in rows.iter().zip(back.iter()) {
            assert_eq!(a.timestamp_us, b.timestamp_us);
            assert!((a.force.fx - b.force.fx).abs() < 1e-8);
            assert_eq!(a.slip.unwrap().0, b.slip.unwrap().0);
            assert_eq!(a.grasp_success, b.grasp_success);
            assert_eq!(a.textile_id, b.textile_id);
        }
    }

    #[test]
    fn label_csv_force_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let rows = vec![LabelRow {
            timestamp_us: 5,
            force: ForceLabel::new(0.0, 0.0, 2.0),
            slip: None,
            pose: None,
            grasp_success: None,
            textile_id: None,
        }];
        write_label_csv(&p, &rows).unwrap();
        let back = read_label_csv(&p).unwrap();
        assert_eq!(back[0].slip, None);
        assert_eq!(back[0].pose, None);
    }
}
