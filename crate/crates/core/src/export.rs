//! CSV and JSON writers for trajectories, pseudo-orbits and reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::integrator::Trajectory;
use crate::shadowing::PseudoOrbit;

/// Rows `t, <x|y|e>, segment_index, post_jump`; boundary times appear once per
/// adjacent segment, and `post_jump` marks segment starts that follow a jump.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", traj.origin.column(), "segment_index", "post_jump"])?;
    for (i, seg) in traj.segments.iter().enumerate() {
        let jumped = i > 0 && traj.samples[i] != traj.pre_jump[i];
        for (j, (t, v)) in seg.times.iter().zip(&seg.values).enumerate() {
            let flag = if jumped && j == 0 { "1" } else { "0" };
            w.write_record([
                t.to_string(),
                v.to_string(),
                i.to_string(),
                flag.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows `index, t_i, x_i` of a pseudo-orbit's post-jump samples.
pub fn write_pseudo_orbit_csv<W: Write>(orbit: &PseudoOrbit, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "t_i", "x_i"])?;
    for (i, (t, x)) in orbit
        .sampling
        .points()
        .iter()
        .zip(&orbit.samples)
        .enumerate()
    {
        w.write_record([i.to_string(), t.to_string(), x.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| crate::Error::Io(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{integrate_truncated, IntegratorSettings, PerturbationSpec};
    use crate::problem::{Field, OdeProblem};
    use crate::sampler::SamplingSequence;

    #[test]
    fn trajectory_csv_marks_jumps() {
        let p = OdeProblem::new(Field::Zero, 1, 0.0, 1.0, 0.0, 1.0).unwrap();
        let seq = SamplingSequence::uniform(0.0, 1.0, 0.5).unwrap();
        let s = IntegratorSettings {
            dense_points: 2,
            ..IntegratorSettings::default()
        };
        let g = PerturbationSpec::impulsive(0.1);
        let x = integrate_truncated(&p, &seq, 0, 0.0, Some(&g), &s).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&x, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x,segment_index,post_jump");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[4], "0.5,0.1,1,1");
    }
}
