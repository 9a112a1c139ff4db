//! Plain-text ground truth next to exported pairs. Numbers carry 12
//! significant digits.

use std::fmt::Write as _;

use hcpm_core::geometry::{Mat3, PairSample, Pose};

use crate::error::{IoError, Result};

/// Geometry of one exported pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub height: usize,
    pub width: usize,
    pub homography: Option<Mat3>,
    pub pose: Pose,
    pub intrinsics_a: Mat3,
    pub intrinsics_b: Mat3,
}

impl Sidecar {
    pub fn of(sample: &PairSample) -> Self {
        Self {
            height: sample.height(),
            width: sample.width(),
            homography: sample.homography,
            pose: sample.pose_ab,
            intrinsics_a: sample.intrinsics_a,
            intrinsics_b: sample.intrinsics_b,
        }
    }
}

fn sig12(v: f64) -> String {
    format!("{v:.11e}")
}

fn line(out: &mut String, key: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {}", sig12(v));
    }
    out.push('\n');
}

fn flat(m: &Mat3) -> impl Iterator<Item = f64> + '_ {
    m.iter().flatten().copied()
}

pub fn format(s: &Sidecar) -> String {
    let mut out = String::from("# hcpm pair: row-major matrices; pose is the 3×4 [R|t] mapping A to B\n");
    let _ = writeln!(out, "size {} {}", s.height, s.width);
    match &s.homography {
        Some(h) => line(&mut out, "homography", flat(h)),
        None => out.push_str("homography none\n"),
    }
    line(&mut out, "pose", s.pose.to_array());
    line(&mut out, "intrinsics_a", flat(&s.intrinsics_a));
    line(&mut out, "intrinsics_b", flat(&s.intrinsics_b));
    out
}

fn mat(v: &[f64]) -> Result<Mat3> {
    if v.len() != 9 {
        return Err(IoError::Sidecar(format!("expected 9 matrix values, got {}", v.len())));
    }
    Ok(std::array::from_fn(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]]))
}

pub fn parse(text: &str) -> Result<Sidecar> {
    let mut size = None;
    let mut homography = None;
    let mut pose = None;
    let mut ka = None;
    let mut kb = None;
    for raw in text.lines() {
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut it = l.split_whitespace();
        let key = it.next().unwrap_or_default();
        let rest: Vec<&str> = it.collect();
        if key == "homography" && rest == ["none"] {
            homography = Some(None);
            continue;
        }
        let nums = rest
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| IoError::Sidecar(format!("bad number {t:?} in {key}"))))
            .collect::<Result<Vec<_>>>()?;
        match key {
            "size" if nums.len() == 2 => size = Some((nums[0] as usize, nums[1] as usize)),
            "homography" => homography = Some(Some(mat(&nums)?)),
            "pose" => {
                let a: [f64; 12] = nums
                    .as_slice()
                    .try_into()
                    .map_err(|_| IoError::Sidecar(format!("pose needs 12 values, got {}", nums.len())))?;
                pose = Some(Pose::from_array(&a));
            }
            "intrinsics_a" => ka = Some(mat(&nums)?),
            "intrinsics_b" => kb = Some(mat(&nums)?),
            _ => return Err(IoError::Sidecar(format!("unexpected line {l:?}"))),
        }
    }
    let missing = |k: &str| IoError::Sidecar(format!("missing {k}"));
    let (height, width) = size.ok_or_else(|| missing("size"))?;
    Ok(Sidecar {
        height,
        width,
        homography: homography.ok_or_else(|| missing("homography"))?,
        pose: pose.ok_or_else(|| missing("pose"))?,
        intrinsics_a: ka.ok_or_else(|| missing("intrinsics_a"))?,
        intrinsics_b: kb.ok_or_else(|| missing("intrinsics_b"))?,
    })
}
