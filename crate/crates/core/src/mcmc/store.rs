//! Binary persistence of per-coefficient posterior draws: one columnar file
//! per coefficient with a magic/version header, named parameter chains, and
//! acceptance/diagnostic summaries.

use super::CoefficientPosterior;
use nalgebra::DMatrix;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SPFMMPS1";

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64_slice<W: Write>(w: &mut W, v: &[f64]) -> io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Serialize one coefficient's posterior to `path`.
pub fn write_posterior(path: &Path, post: &CoefficientPosterior) -> io::Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let g = post.fixed.nrows();
    let a = post.fixed.ncols();
    let h1 = post.vc.ncols();
    write_u32(&mut w, post.k as u32)?;
    write_u32(&mut w, g as u32)?;
    write_u32(&mut w, a as u32)?;
    write_u32(&mut w, h1 as u32)?;
    write_u32(&mut w, post.spline.len() as u32)?;
    write_u32(&mut w, post.param_names.len() as u32)?;
    for name in &post.param_names {
        let bytes = name.as_bytes();
        write_u32(&mut w, bytes.len() as u32)?;
        w.write_all(bytes)?;
    }
    for c in 0..a {
        write_f64_slice(&mut w, post.fixed.column(c).as_slice())?;
    }
    for c in 0..a {
        let col: Vec<u8> = (0..g).map(|r| post.gamma[(r, c)]).collect();
        w.write_all(&col)?;
    }
    for c in 0..h1 {
        write_f64_slice(&mut w, post.vc.column(c).as_slice())?;
    }
    for s in &post.spline {
        write_u32(&mut w, s.ncols() as u32)?;
        for c in 0..s.ncols() {
            write_f64_slice(&mut w, s.column(c).as_slice())?;
        }
    }
    write_f64_slice(&mut w, &post.accept_rate)?;
    write_f64_slice(&mut w, &post.geweke_z)?;
    write_f64_slice(&mut w, &post.geweke_p)?;
    write_f64_slice(&mut w, &post.ess)?;
    w.flush()
}

/// Read a posterior file written by `write_posterior`.
pub fn read_posterior(path: &Path) -> io::Result<CoefficientPosterior> {
    let mut r = io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a posterior file (bad magic)"));
    }
    let k = read_u32(&mut r)? as usize;
    let g = read_u32(&mut r)? as usize;
    let a = read_u32(&mut r)? as usize;
    let h1 = read_u32(&mut r)? as usize;
    let n_spline = read_u32(&mut r)? as usize;
    let n_params = read_u32(&mut r)? as usize;
    let mut param_names = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        param_names.push(String::from_utf8(buf).map_err(|_| bad("parameter name not utf-8"))?);
    }
    let mut fixed = DMatrix::zeros(g, a);
    for c in 0..a {
        let col = read_f64_vec(&mut r, g)?;
        for (row, v) in col.into_iter().enumerate() {
            fixed[(row, c)] = v;
        }
    }
    let mut gamma = DMatrix::zeros(g, a);
    for c in 0..a {
        let mut col = vec![0u8; g];
        r.read_exact(&mut col)?;
        for (row, v) in col.into_iter().enumerate() {
            gamma[(row, c)] = v;
        }
    }
    let mut vc = DMatrix::zeros(g, h1);
    for c in 0..h1 {
        let col = read_f64_vec(&mut r, g)?;
        for (row, v) in col.into_iter().enumerate() {
            vc[(row, c)] = v;
        }
    }
    let mut spline = Vec::with_capacity(n_spline);
    for _ in 0..n_spline {
        let m = read_u32(&mut r)? as usize;
        let mut block = DMatrix::zeros(g, m);
        for c in 0..m {
            let col = read_f64_vec(&mut r, g)?;
            for (row, v) in col.into_iter().enumerate() {
                block[(row, c)] = v;
            }
        }
        spline.push(block);
    }
    let accept_rate = read_f64_vec(&mut r, h1)?;
    let geweke_z = read_f64_vec(&mut r, n_params)?;
    let geweke_p = read_f64_vec(&mut r, n_params)?;
    let ess = read_f64_vec(&mut r, n_params)?;
    Ok(CoefficientPosterior {
        k,
        fixed,
        gamma,
        vc,
        spline,
        accept_rate,
        param_names,
        geweke_z,
        geweke_p,
        ess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn round_trips_posterior_files() {
        let post = CoefficientPosterior {
            k: 7,
            fixed: DMatrix::from_fn(5, 2, |r, c| (r * 2 + c) as f64 * 0.5 - 1.0),
            gamma: DMatrix::from_fn(5, 2, |r, c| ((r + c) % 2) as u8),
            vc: DMatrix::from_fn(5, 3, |r, c| 0.1 + r as f64 + 10.0 * c as f64),
            spline: vec![DMatrix::from_fn(5, 4, |r, c| (r as f64 - c as f64) * 0.25)],
            accept_rate: vec![0.4, 0.5, 0.6],
            param_names: vec![
                "b[0]".into(),
                "b[1]".into(),
                "q[x]".into(),
                "q[y]".into(),
                "s".into(),
            ],
            geweke_z: vec![0.1, -0.2, 0.3, 0.0, 1.1],
            geweke_p: vec![0.9, 0.8, 0.7, 1.0, 0.3],
            ess: vec![100.0, 200.0, 50.0, 75.0, 400.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k_0007.post");
        write_posterior(&path, &post).unwrap();
        let back = read_posterior(&path).unwrap();
        assert_eq!(back.k, 7);
        assert_eq!(back.fixed, post.fixed);
        assert_eq!(back.gamma, post.gamma);
        assert_eq!(back.vc, post.vc);
        assert_eq!(back.spline, post.spline);
        assert_eq!(back.accept_rate, post.accept_rate);
        assert_eq!(back.param_names, post.param_names);
        assert_eq!(back.ess, post.ess);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.post");
        std::fs::write(&path, b"NOTMAGIC plus junk").unwrap();
        assert!(read_posterior(&path).is_err());
    }
}
