//! Directory-level metrics.
//!
//! Every `NAME.ppm` in the prediction directory is an image scored by SSIM and
//! L1; every `NAME.pgm` is a mask scored by Jaccard. A reference is found at
//! `REF/NAME.ppm` (`.pgm`) or, for a dataset directory, at `REF/NAME/gt.ppm`
//! (`REF/NAME/ctm.pgm`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::image_io::{read_pgm, read_ppm};
use crate::objectives::{jaccard, l1_loss, ssim};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMetrics {
    pub name: String,
    pub ssim: Option<f64>,
    pub l1: Option<f64>,
    pub jaccard: Option<f64>,
}

/// Per-sample metrics sorted by name, plus means over the samples that have them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub samples: Vec<SampleMetrics>,
    pub ssim: Option<f64>,
    pub l1: Option<f64>,
    pub jaccard: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Image,
    Mask,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn resolve(reference: &Path, name: &str, kind: Kind) -> Option<PathBuf> {
    let (ext, inner) = match kind {
        Kind::Image => ("ppm", "gt.ppm"),
        Kind::Mask => ("pgm", "ctm.pgm"),
    };
    [reference.join(format!("{name}.{ext}")), reference.join(name).join(inner)]
        .into_iter()
        .find(|p| p.is_file())
}

fn list_predictions(dir: &Path) -> Result<Vec<(String, Kind, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let kind = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => Kind::Image,
            Some("pgm") => Kind::Mask,
            _ => continue,
        };
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), kind, path.clone()));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0).then((a.1 as u8).cmp(&(b.1 as u8))));
    Ok(out)
}

pub fn evaluate(pred_dir: &Path, ref_dir: &Path) -> Result<Report> {
    let preds = list_predictions(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Empty(format!("no .ppm or .pgm predictions in {}", pred_dir.display())));
    }
    let mut pairs = Vec::with_capacity(preds.len());
    let mut missing = Vec::new();
    for (name, kind, path) in preds {
        match resolve(ref_dir, &name, kind) {
            Some(r) => pairs.push((name, kind, path, r)),
            None => missing.push(format!("{} (for {})", ref_dir.join(&name).display(), path.display())),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Missing(missing));
    }
    let scored: Vec<(String, Kind, f64, f64)> = pairs
        .par_iter()
        .map(|(name, kind, p, r)| {
            Ok(match kind {
                Kind::Image => {
                    let (a, b) = (read_ppm(p)?, read_ppm(r)?);
                    (name.clone(), *kind, ssim(&a, &b)?, l1_loss(&a, &b)?)
                }
                Kind::Mask => {
                    let (a, b) = (read_pgm(p)?, read_pgm(r)?);
                    (name.clone(), *kind, jaccard(&a, &b)?, 0.0)
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut samples: Vec<SampleMetrics> = Vec::new();
    for (name, kind, x, y) in scored {
        if samples.last().map(|s| &s.name) != Some(&name) {
            samples.push(SampleMetrics {
                name,
                ..Default::default()
            });
        }
        let s = samples.last_mut().expect("pushed above");
        match kind {
            Kind::Image => {
                s.ssim = Some(x);
                s.l1 = Some(y);
            }
            Kind::Mask => s.jaccard = Some(x),
        }
    }
    Ok(Report {
        ssim: mean(samples.iter().map(|s| s.ssim)),
        l1: mean(samples.iter().map(|s| s.l1)),
        jaccard: mean(samples.iter().map(|s| s.jaccard)),
        samples,
    })
}

impl Report {
    /// `NAME.metric=value` per sample, then `metric=value` means.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            for (key, v) in [("ssim", s.ssim), ("jaccard", s.jaccard), ("l1", s.l1)] {
                if let Some(v) = v {
                    let _ = writeln!(out, "{}.{key}={v}", s.name);
                }
            }
        }
        for (key, v) in [("ssim", self.ssim), ("jaccard", self.jaccard), ("l1", self.l1)] {
            if let Some(v) = v {
                let _ = writeln!(out, "{key}={v}");
            }
        }
        out
    }

    /// Inverse of [`Report::to_text`]; sample names must not contain `=`.
    pub fn parse(text: &str) -> Result<Report> {
        let mut report = Report::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("report line without '=': {line:?}")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Corrupt(format!("bad report value in {line:?}")))?;
            let (name, metric) = match key.rsplit_once('.') {
                Some((n, m)) => (Some(n), m),
                None => (None, key),
            };
            if let Some(n) = name {
                if report.samples.last().map(|s| s.name.as_str()) != Some(n) {
                    report.samples.push(SampleMetrics {
                        name: n.to_string(),
                        ..Default::default()
                    });
                }
            }
            let target = match (name, metric) {
                (None, "ssim") => &mut report.ssim,
                (None, "jaccard") => &mut report.jaccard,
                (None, "l1") => &mut report.l1,
                (Some(_), m) => {
                    let s = report.samples.last_mut().expect("pushed above");
                    match m {
                        "ssim" => &mut s.ssim,
                        "jaccard" => &mut s.jaccard,
                        "l1" => &mut s.l1,
                        _ => return Err(Error::Corrupt(format!("unknown metric in {line:?}"))),
                    }
                }
                _ => return Err(Error::Corrupt(format!("unknown metric in {line:?}"))),
            };
            *target = Some(v);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::image_io::{write_pgm, write_ppm};
    use crate::kernel::Tensor;

    fn img(seed: usize) -> Tensor {
        Tensor::from_fn(&[3, 12, 12], |i| ((i[0] * 31 + i[1] * 7 + i[2] * 3 + seed) % 17) as f64 / 16.0)
    }

    fn mask(seed: usize) -> Tensor {
        Tensor::from_fn(&[1, 12, 12], |i| (i[1] + seed).is_multiple_of(3) as u8 as f64)
    }

    #[test]
    fn identical_directories_score_perfectly() {
        let (p, r) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [p.path(), r.path()] {
            write_ppm(&d.join("a.ppm"), &img(0)).unwrap();
            write_ppm(&d.join("b.ppm"), &img(5)).unwrap();
            write_pgm(&d.join("a.pgm"), &mask(1)).unwrap();
        }
        let rep = evaluate(p.path(), r.path()).unwrap();
        assert_eq!(rep.samples.len(), 2);
        assert!((rep.ssim.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rep.jaccard, Some(1.0));
        assert_eq!(rep.l1, Some(0.0));
        assert_eq!(Report::parse(&rep.to_text()).unwrap(), rep);
    }

    #[test]
    fn dataset_layout_references_resolve() {
        let (p, r) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sample = r.path().join("sample_000000");
        std::fs::create_dir(&sample).unwrap();
        write_ppm(&sample.join("gt.ppm"), &img(2)).unwrap();
        write_pgm(&sample.join("ctm.pgm"), &mask(0)).unwrap();
        write_ppm(&p.path().join("sample_000000.ppm"), &img(3)).unwrap();
        write_pgm(&p.path().join("sample_000000.pgm"), &mask(0)).unwrap();
        let rep = evaluate(p.path(), r.path()).unwrap();
        assert_eq!(rep.samples[0].jaccard, Some(1.0));
        assert!(rep.l1.unwrap() > 0.0);
    }

    #[test]
    fn missing_and_empty_inputs_are_errors() {
        let (p, r) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert!(matches!(evaluate(p.path(), r.path()), Err(Error::Empty(_))));
        write_ppm(&p.path().join("x.ppm"), &img(0)).unwrap();
        write_ppm(&p.path().join("y.ppm"), &img(0)).unwrap();
        write_ppm(&r.path().join("x.ppm"), &img(0)).unwrap();
        match evaluate(p.path(), r.path()) {
            Err(Error::Missing(list)) => {
                assert_eq!(list.len(), 1);
                assert!(list[0].contains('y'));
            }
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn report_format() {
        let rep = Report {
            samples: vec![SampleMetrics {
                name: "s.1".into(),
                ssim: Some(0.5),
                l1: Some(0.25),
                jaccard: None,
            }],
            ssim: Some(0.5),
            l1: Some(0.25),
            jaccard: None,
        };
        assert_eq!(rep.to_text(), "s.1.ssim=0.5\ns.1.l1=0.25\nssim=0.5\nl1=0.25\n");
        assert_eq!(Report::parse(&rep.to_text()).unwrap(), rep);
        assert!(Report::parse("ssim=abc").is_err());
        assert!(Report::parse("psnr=3").is_err());
    }
}
